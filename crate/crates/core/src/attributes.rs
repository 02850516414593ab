//! Pseudo-attribute discovery by category-bounded clustering.
//!
//! Identities are clustered in feature space under a constrained metric:
//! distance between same-category identities is Euclidean, distance across
//! categories is infinite. Because no point can ever join a cluster seeded
//! in another category, the global problem decomposes exactly into one
//! k-means per category; this module runs that decomposition and stitches
//! the per-category cluster labels into a single attribute index space.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{read_embeddings, write_embeddings, Catalog, EmbeddingMatrix};

/// Distance under the category constraint: Euclidean within a category,
/// infinite across categories.
pub fn constrained_distance(a: &[f32], cat_a: &str, b: &[f32], cat_b: &str) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if cat_a != cat_b {
        return Ok(f64::INFINITY);
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let diff = x as f64 - y as f64;
        acc += diff * diff;
    }
    Ok(acc.sqrt())
}

/// Splits a total cluster budget across categories by largest-remainder
/// apportionment on identity counts.
///
/// Every non-empty category receives at least one cluster and never more
/// clusters than it has identities; ties on remainders are broken by
/// category name ascending (and the inverse when seats must be taken back
/// after the at-least-one floor over-allocates).
pub fn allocate_cluster_budget(
    catalog: &Catalog,
    k_total: usize,
) -> Result<BTreeMap<String, usize>> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for entry in catalog.entries() {
        *counts.entry(entry.category.clone()).or_insert(0) += 1;
    }
    if counts.is_empty() {
        return Err(Error::Budget("catalog has no identities".into()));
    }
    let n_categories = counts.len();
    let n_total: usize = counts.values().sum();
    if k_total < n_categories {
        return Err(Error::Budget(format!(
            "budget {k_total} is below the number of non-empty categories {n_categories}"
        )));
    }
    if k_total > n_total {
        return Err(Error::Budget(format!(
            "budget {k_total} exceeds the number of identities {n_total}"
        )));
    }

    let names: Vec<&String> = counts.keys().collect();
    let sizes: Vec<usize> = counts.values().copied().collect();
    let quotas: Vec<f64> =
        sizes.iter().map(|&s| k_total as f64 * s as f64 / n_total as f64).collect();
    let mut alloc: Vec<usize> =
        quotas.iter().map(|&q| (q.floor() as usize).max(1)).collect();
    let mut sum: usize = alloc.iter().sum();

    // The at-least-one floor can over-allocate; take seats back from the
    // most over-served categories (largest alloc - quota), later names first.
    while sum > k_total {
        let victim = (0..alloc.len())
            .filter(|&i| alloc[i] > 1)
            .max_by(|&i, &j| {
                let over_i = alloc[i] as f64 - quotas[i];
                let over_j = alloc[j] as f64 - quotas[j];
                over_i.partial_cmp(&over_j).unwrap().then_with(|| names[i].cmp(names[j]))
            })
            .expect("sum > k_total >= n_categories implies some alloc > 1");
        alloc[victim] -= 1;
        sum -= 1;
    }
    // Hand out remaining seats by largest deficit (equals largest remainder
    // when no cap binds), earlier names first.
    while sum < k_total {
        let winner = (0..alloc.len())
            .filter(|&i| alloc[i] < sizes[i])
            .max_by(|&i, &j| {
                let def_i = quotas[i] - alloc[i] as f64;
                let def_j = quotas[j] - alloc[j] as f64;
                def_i.partial_cmp(&def_j).unwrap().then_with(|| names[j].cmp(names[i]))
            })
            .expect("sum < k_total <= n_total implies some alloc below its cap");
        alloc[winner] += 1;
        sum += 1;
    }

    Ok(names.into_iter().cloned().zip(alloc).collect())
}

/// Clustering controls.
#[derive(Debug, Clone, Copy)]
pub struct ClusterParams {
    pub seed: u64,
    pub max_iters: usize,
    /// Relative per-iteration cost-decrease threshold for convergence.
    pub tol: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams { seed: 0, max_iters: 100, tol: 1e-6 }
    }
}

/// Result of attribute clustering: a global attribute label per identity
/// plus the centroid table, laid out category-block by category-block in
/// category name order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeAssignment {
    pub labels: BTreeMap<String, usize>,
    /// `k_total x dim`, row-major.
    pub centroids: Vec<f32>,
    /// Category owning each centroid row.
    pub centroid_category: Vec<String>,
    pub dim: usize,
    /// Total within-cluster squared distance of the final assignment.
    pub total_cost: f64,
    /// Per-iteration assignment cost per category, non-increasing.
    pub cost_trace: BTreeMap<String, Vec<f64>>,
}

impl AttributeAssignment {
    pub fn k_total(&self) -> usize {
        self.centroid_category.len()
    }

    pub fn centroid(&self, attribute: usize) -> &[f32] {
        &self.centroids[attribute * self.dim..(attribute + 1) * self.dim]
    }
}

/// Derives the per-category RNG stream for a base seed. FNV-1a keeps the
/// derivation stable across platforms and releases.
fn category_seed(seed: u64, category: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in category.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// k-means++ seeding: returns `k` distinct point indices, the first chosen
/// uniformly and the rest with probability proportional to the squared
/// distance to the nearest centroid chosen so far.
pub fn kmeans_plus_plus<R: Rng>(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let m = points.len();
    if k == 0 || k > m {
        return Err(Error::Budget(format!("cannot seed {k} clusters from {m} points")));
    }
    let mut chosen = Vec::with_capacity(k);
    let first = rng.gen_range(0..m);
    chosen.push(first);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[first])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // All remaining mass is zero (duplicate points); take the lowest
            // index not yet chosen.
            (0..m).find(|i| !chosen.contains(i)).expect("k <= m leaves an unchosen point")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &points[next]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    Ok(chosen)
}

struct LloydOutcome {
    assign: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    cost_trace: Vec<f64>,
    final_cost: f64,
}

/// One Lloyd run over a single category's points.
fn lloyd(points: &[Vec<f64>], init: &[usize], max_iters: usize, tol: f64) -> LloydOutcome {
    let m = points.len();
    let k = init.len();
    let dim = points[0].len();
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|&i| points[i].clone()).collect();
    let mut assign = vec![0usize; m];
    let mut prev_assign: Option<Vec<usize>> = None;
    let mut cost_trace = Vec::new();

    for _ in 0..max_iters {
        // Assignment pass against current centroids; ties go to the lowest
        // centroid index.
        let mut cost = 0.0f64;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = dist2(p, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = dist2(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
            cost += best_d;
        }
        let prev_cost = cost_trace.last().copied();
        cost_trace.push(cost);
        if prev_assign.as_ref() == Some(&assign) {
            break;
        }
        if let Some(prev) = prev_cost {
            if prev == 0.0 || (prev - cost) < tol * prev {
                break;
            }
        }

        // Repair empty clusters: move the farthest member of the largest
        // cluster into each empty one.
        let mut sizes = vec![0usize; k];
        for &a in &assign {
            sizes[a] += 1;
        }
        for e in 0..k {
            if sizes[e] > 0 {
                continue;
            }
            let donor = (0..k)
                .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
                .expect("k >= 1");
            if sizes[donor] <= 1 {
                continue;
            }
            let farthest = (0..m)
                .filter(|&i| assign[i] == donor)
                .max_by(|&a, &b| {
                    dist2(&points[a], &centroids[donor])
                        .partial_cmp(&dist2(&points[b], &centroids[donor]))
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .expect("donor has members");
            assign[farthest] = e;
            sizes[donor] -= 1;
            sizes[e] += 1;
        }

        // Update pass: centroids become the means of their members.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            }
        }
        prev_assign = Some(assign.clone());
    }

    // Make the returned centroids the means of the returned assignment.
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(&assign) {
        counts[a] += 1;
        for (s, &v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for s in &mut sums[c] {
                *s /= counts[c] as f64;
            }
            centroids[c] = std::mem::take(&mut sums[c]);
        }
    }
    let final_cost: f64 =
        points.iter().zip(&assign).map(|(p, &a)| dist2(p, &centroids[a])).sum();

    LloydOutcome { assign, centroids, cost_trace, final_cost }
}

/// Clusters identities into pseudo-attributes under the category constraint.
///
/// `budget` fixes the cluster count per category (see
/// [`allocate_cluster_budget`]). Each category runs an independent Lloyd
/// pass seeded from its own RNG stream (`seed ^ fnv1a(category)`), so the
/// result is bitwise deterministic for a given seed regardless of thread
/// schedule. Global attribute indices are dense, grouped by category in
/// name order.
pub fn cluster_attributes(
    x: &EmbeddingMatrix,
    catalog: &Catalog,
    budget: &BTreeMap<String, usize>,
    params: &ClusterParams,
) -> Result<AttributeAssignment> {
    // Category membership in row order.
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (row, id) in x.ids().iter().enumerate() {
        let category = catalog
            .category_of(id)
            .ok_or_else(|| Error::Label(format!("id {id:?} has no catalog category")))?;
        members.entry(category).or_default().push(row);
    }
    for (category, &k) in budget {
        let m = members.get(category.as_str()).map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::Budget(format!("category {category:?} has zero budget")));
        }
        if k > m {
            return Err(Error::Budget(format!(
                "category {category:?} has budget {k} but only {m} identities"
            )));
        }
    }
    for category in members.keys() {
        if !budget.contains_key(*category) {
            return Err(Error::Budget(format!("category {category:?} missing from budget")));
        }
    }

    let tasks: Vec<(&str, &Vec<usize>, usize)> = members
        .iter()
        .map(|(cat, rows)| (*cat, rows, budget[*cat]))
        .collect();
    let outcomes: Vec<(String, Vec<usize>, LloydOutcome)> = tasks
        .par_iter()
        .map(|&(category, rows, k)| {
            let points: Vec<Vec<f64>> = rows
                .iter()
                .map(|&r| x.row(r).iter().map(|&v| v as f64).collect())
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(category_seed(params.seed, category));
            let init = kmeans_plus_plus(&points, k, &mut rng)
                .expect("budget validated against member count");
            let outcome = lloyd(&points, &init, params.max_iters, params.tol);
            (category.to_string(), rows.clone(), outcome)
        })
        .collect();

    let dim = x.dim();
    let mut labels = BTreeMap::new();
    let mut centroids = Vec::new();
    let mut centroid_category = Vec::new();
    let mut cost_trace = BTreeMap::new();
    let mut total_cost = 0.0f64;
    let mut offset = 0usize;
    // `outcomes` preserves the BTreeMap category order.
    for (category, rows, outcome) in outcomes {
        for (&row, &cluster) in rows.iter().zip(&outcome.assign) {
            labels.insert(x.id(row).to_string(), offset + cluster);
        }
        for centroid in &outcome.centroids {
            centroids.extend(centroid.iter().map(|&v| v as f32));
            centroid_category.push(category.clone());
        }
        total_cost += outcome.final_cost;
        offset += outcome.centroids.len();
        cost_trace.insert(category, outcome.cost_trace);
    }

    Ok(AttributeAssignment {
        labels,
        centroids,
        centroid_category,
        dim,
        total_cost,
        cost_trace,
    })
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    id: String,
    attribute: usize,
}

#[derive(Serialize, Deserialize)]
struct AssignmentMeta {
    centroid_category: Vec<String>,
    dim: usize,
    total_cost: f64,
    cost_trace: BTreeMap<String, Vec<f64>>,
}

/// Persists an assignment as three artifacts next to `stem`: labels
/// (`<stem>.labels.jsonl`), centroids (`<stem>.centroids.emb`), and metadata
/// (`<stem>.meta.json`).
pub fn save_assignment<P: AsRef<Path>>(stem: P, assignment: &AttributeAssignment) -> Result<()> {
    let stem = stem.as_ref();
    let mut writer = BufWriter::new(File::create(with_suffix(stem, ".labels.jsonl"))?);
    for (id, &attribute) in &assignment.labels {
        serde_json::to_writer(&mut writer, &LabelRecord { id: id.clone(), attribute })
            .map_err(|e| Error::Format(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;

    let ids: Vec<String> =
        (0..assignment.k_total()).map(|a| format!("__attr_{a}")).collect();
    let matrix = EmbeddingMatrix::new(ids, assignment.dim, assignment.centroids.clone())?;
    write_embeddings(with_suffix(stem, ".centroids.emb"), &matrix)?;

    let meta = AssignmentMeta {
        centroid_category: assignment.centroid_category.clone(),
        dim: assignment.dim,
        total_cost: assignment.total_cost,
        cost_trace: assignment.cost_trace.clone(),
    };
    let mut writer = BufWriter::new(File::create(with_suffix(stem, ".meta.json"))?);
    serde_json::to_writer_pretty(&mut writer, &meta).map_err(|e| Error::Format(e.to_string()))?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

/// Loads an assignment written by [`save_assignment`].
pub fn load_assignment<P: AsRef<Path>>(stem: P) -> Result<AttributeAssignment> {
    let stem = stem.as_ref();
    let reader = BufReader::new(File::open(with_suffix(stem, ".labels.jsonl"))?);
    let mut labels = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LabelRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        if labels.insert(record.id.clone(), record.attribute).is_some() {
            return Err(Error::DuplicateId { id: record.id });
        }
    }
    let matrix = read_embeddings(with_suffix(stem, ".centroids.emb"))?;
    let meta_file = File::open(with_suffix(stem, ".meta.json"))?;
    let meta: AssignmentMeta = serde_json::from_reader(BufReader::new(meta_file))
        .map_err(|e| Error::Format(e.to_string()))?;
    if meta.centroid_category.len() != matrix.len() || meta.dim != matrix.dim() {
        return Err(Error::Format("assignment metadata does not match centroid matrix".into()));
    }
    Ok(AttributeAssignment {
        labels,
        centroids: matrix.data().to_vec(),
        centroid_category: meta.centroid_category,
        dim: meta.dim,
        total_cost: meta.total_cost,
        cost_trace: meta.cost_trace,
    })
}

fn with_suffix(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut os = stem.as_os_str().to_os_string();
    os.push(suffix);
    os.into()
}
