//! Seeded synthetic datasets with known ground truth.
//!
//! Every generated corpus is a Gaussian mixture with planted structure:
//! per-category attribute centroids spaced far apart, identities jittered
//! around their centroid, instances as noisy views of identities, context
//! groups assigned round-robin, and design sets sampled strictly within a
//! group. The planted labels ride along in a ground-truth record so
//! property tests can score recovery exactly.
//!
//! A second generator builds the feature-ambiguous fixture: instances
//! whose nearest neighbors are planted cross-group distractors, leaving
//! the true identity buried below rank 5 on features alone while context
//! still identifies it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    Catalog, CatalogEntry, DesignSet, DesignSetCollection, EmbeddingMatrix, InstanceQuery,
    QuerySet,
};

/// Identity jitter around a planted centroid; centroid separation is
/// expressed in multiples of this.
const CLUSTER_SIGMA: f64 = 1.0;
/// Required pairwise centroid distance.
const CENTROID_SEPARATION: f64 = 6.0 * CLUSTER_SIGMA;
/// Gaussian scale for centroid proposals.
const CENTROID_SCALE: f64 = 10.0;
/// Rejection-sampling budget per centroid.
const CENTROID_ATTEMPTS: usize = 1000;
/// Instances per generated image.
const IMAGE_CHUNK: usize = 3;

/// Shape of a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub categories: usize,
    pub identities_per_category: usize,
    /// Planted attribute clusters per category.
    pub attributes_per_category: usize,
    pub dim: usize,
    pub instance_noise_sigma: f64,
    pub instances_per_identity: usize,
    pub context_groups: usize,
    /// Design sets to sample.
    pub designs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: 4,
            identities_per_category: 50,
            attributes_per_category: 3,
            dim: 16,
            instance_noise_sigma: 0.05,
            instances_per_identity: 3,
            context_groups: 4,
            designs: 40,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("categories", self.categories),
            ("identities_per_category", self.identities_per_category),
            ("attributes_per_category", self.attributes_per_category),
            ("dim", self.dim),
            ("instances_per_identity", self.instances_per_identity),
            ("context_groups", self.context_groups),
            ("designs", self.designs),
        ] {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.instance_noise_sigma >= 0.0) {
            return Err(Error::Config("instance_noise_sigma must be >= 0".into()));
        }
        if self.attributes_per_category > self.identities_per_category {
            return Err(Error::Config(
                "attributes_per_category cannot exceed identities_per_category".into(),
            ));
        }
        let total = self.categories * self.identities_per_category;
        if total / self.context_groups < 2 {
            return Err(Error::Config(format!(
                "{} context groups cannot each hold two of {total} identities",
                self.context_groups
            )));
        }
        Ok(())
    }
}

/// Planted labels for oracle checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Identity to planted global attribute index.
    pub attribute_of: BTreeMap<String, usize>,
    /// Identity to planted context group.
    pub group_of: BTreeMap<String, usize>,
}

/// A full generated corpus in ingest-module types.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub catalog: Catalog,
    pub identities: EmbeddingMatrix,
    pub instances: EmbeddingMatrix,
    pub queries: QuerySet,
    pub designs: DesignSetCollection,
    pub truth: GroundTruth,
}

fn unit_gaussian_vec<R: Rng>(rng: &mut R, dim: usize, sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    (0..dim).map(|_| if sigma == 0.0 { 0.0 } else { normal.sample(rng) }).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draws `count` centroids pairwise at least [`CENTROID_SEPARATION`] apart.
fn sample_centroids<R: Rng>(rng: &mut R, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..CENTROID_ATTEMPTS {
            let cand = unit_gaussian_vec(rng, dim, CENTROID_SCALE);
            if centroids.iter().all(|c| euclid(c, &cand) >= CENTROID_SEPARATION) {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(c) => centroids.push(c),
            None => {
                return Err(Error::Config(format!(
                    "could not separate {count} centroids by {CENTROID_SEPARATION} in dim {dim}"
                )))
            }
        }
    }
    Ok(centroids)
}

/// Generates a corpus with planted attribute clusters and context groups.
///
/// Deterministic under the seed: two calls with equal configs produce
/// bitwise-identical embeddings, catalogs, queries, and design sets.
pub fn generate_synthetic_dataset(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim;

    // Planted attribute centroids, separated globally so identities from
    // different categories never collide in feature space either.
    let total_attributes = config.categories * config.attributes_per_category;
    let centroids = sample_centroids(&mut rng, total_attributes, dim)?;

    let mut entries = Vec::new();
    let mut identity_ids = Vec::new();
    let mut identity_data: Vec<f32> = Vec::new();
    let mut identity_vecs: Vec<Vec<f64>> = Vec::new();
    let mut attribute_of = BTreeMap::new();
    let mut group_of = BTreeMap::new();
    let total_identities = config.categories * config.identities_per_category;

    for cat_idx in 0..config.categories {
        let category = format!("cat_{cat_idx:02}");
        for i in 0..config.identities_per_category {
            let id = format!("id_{cat_idx:02}_{i:03}");
            let local_attr = i % config.attributes_per_category;
            let global_attr = cat_idx * config.attributes_per_category + local_attr;
            let jitter = unit_gaussian_vec(&mut rng, dim, CLUSTER_SIGMA);
            let vec: Vec<f64> =
                centroids[global_attr].iter().zip(&jitter).map(|(c, j)| c + j).collect();
            let global_idx = cat_idx * config.identities_per_category + i;
            attribute_of.insert(id.clone(), global_attr);
            group_of.insert(id.clone(), global_idx % config.context_groups);
            entries.push(CatalogEntry {
                id: id.clone(),
                category: category.clone(),
                styles: Vec::new(),
            });
            identity_data.extend(vec.iter().map(|&v| v as f32));
            identity_vecs.push(vec);
            identity_ids.push(id);
        }
    }
    let catalog = Catalog::new(entries)?;
    let identities = EmbeddingMatrix::new(identity_ids.clone(), dim, identity_data)?;

    // Context groups -> member lists, in identity order.
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); config.context_groups];
    for idx in 0..total_identities {
        groups[idx % config.context_groups].push(idx);
    }

    // Design sets sampled within one group each.
    let mut sets = Vec::with_capacity(config.designs);
    for d in 0..config.designs {
        let group = &groups[d % config.context_groups];
        let size = rng.gen_range(2..=group.len().min(5));
        let mut members = group.clone();
        members.shuffle(&mut rng);
        members.truncate(size);
        members.sort_unstable();
        sets.push(DesignSet {
            design_id: format!("design_{d:03}"),
            items: members.iter().map(|&m| identity_ids[m].clone()).collect(),
        });
    }
    let designs = DesignSetCollection { sets, dropped_small: 0 };

    // Instances: noisy views of identities. Images chunk instances within
    // a context group so co-cropped instances share a group.
    let mut instance_ids = Vec::new();
    let mut instance_data: Vec<f32> = Vec::new();
    let mut queries = Vec::new();
    for (group_idx, group) in groups.iter().enumerate() {
        let mut chunk = 0usize;
        let mut in_chunk = 0usize;
        for view in 0..config.instances_per_identity {
            for &ident_idx in group {
                let identity_id = &identity_ids[ident_idx];
                let noise = unit_gaussian_vec(&mut rng, dim, config.instance_noise_sigma);
                let vec: Vec<f64> =
                    identity_vecs[ident_idx].iter().zip(&noise).map(|(v, n)| v + n).collect();
                let instance_id = format!("q_{identity_id}_{view}");
                instance_data.extend(vec.iter().map(|&v| v as f32));
                instance_ids.push(instance_id.clone());
                queries.push(InstanceQuery {
                    instance_id,
                    image_id: format!("img_g{group_idx:02}_{chunk:04}"),
                    category: catalog.category_of(identity_id).expect("generated id").to_string(),
                    gt: identity_id.clone(),
                });
                in_chunk += 1;
                if in_chunk == IMAGE_CHUNK {
                    in_chunk = 0;
                    chunk += 1;
                }
            }
        }
    }
    let instances = EmbeddingMatrix::new(instance_ids, dim, instance_data)?;
    let queries = QuerySet::new(queries)?;

    Ok(SyntheticDataset {
        catalog,
        identities,
        instances,
        queries,
        designs,
        truth: GroundTruth { attribute_of, group_of },
    })
}

/// Layout constants of the feature-ambiguous fixture.
const FIXTURE_GROUPS: usize = 4;
const FIXTURE_MEMBERS: usize = 6;
const FIXTURE_CATEGORIES: usize = 3;
const FIXTURE_DIM: usize = 16;
const FIXTURE_SIGMA: f64 = 0.05;

/// Generates the context-informative, feature-ambiguous corpus.
///
/// Four context groups of six identities each, two views per identity.
/// Views use antipodal fixed-norm noise (view 0 at identity + n, view 1
/// at identity - n, |n| = sigma * sqrt(dim) = R exactly) so the geometry
/// below holds by construction, not by luck. First-view instances are
/// easy: their nearest identity is their ground truth. Second-view
/// instances are ambiguous: five to seven dedicated distractor identities
/// (ids prefixed `zdst_`, same category, members of a foreign group's
/// design sets) sit at exact radius rho * R, rho < 1, around the view,
/// so each beats the ground truth there (rho * R < R) yet stays away from
/// the sibling easy view (|2n - u * rho * R| >= (2 - rho) * R > R). That
/// pins the ground truth to feature rank 6..=8 for ambiguous views and
/// rank 1 for easy ones. Images mix one easy anchor with two ambiguous
/// instances, except one all-easy image per group, so set accuracy at 5
/// starts at exactly the all-easy fraction and context re-ranking has
/// signal to recover the rest.
pub fn generate_context_fixture(seed: u64) -> Result<SyntheticDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = FIXTURE_DIM;
    let total = FIXTURE_GROUPS * FIXTURE_MEMBERS;

    // Well-separated identity vectors; group g member m has global index
    // g * FIXTURE_MEMBERS + m.
    let positions = sample_centroids(&mut rng, total, dim)?;
    let mut entries = Vec::new();
    let mut identity_ids = Vec::new();
    let mut attribute_of = BTreeMap::new();
    let mut group_of = BTreeMap::new();
    for g in 0..FIXTURE_GROUPS {
        for m in 0..FIXTURE_MEMBERS {
            let id = format!("id_g{g}_{m:02}");
            let cat_idx = m % FIXTURE_CATEGORIES;
            entries.push(CatalogEntry {
                id: id.clone(),
                category: format!("cat_{cat_idx:02}"),
                styles: Vec::new(),
            });
            attribute_of.insert(id.clone(), cat_idx);
            group_of.insert(id.clone(), g);
            identity_ids.push(id);
        }
    }

    // Group design sets: one full-group set plus two random subsets, so
    // every member has a trained context vector anchored to its group.
    let mut sets = Vec::new();
    for g in 0..FIXTURE_GROUPS {
        let members: Vec<String> =
            (0..FIXTURE_MEMBERS).map(|m| format!("id_g{g}_{m:02}")).collect();
        sets.push(DesignSet { design_id: format!("design_g{g}_full"), items: members.clone() });
        for (tag, start) in [("a", 0usize), ("b", 3usize)] {
            let mut sub: Vec<String> = (0..3).map(|o| members[(start + o) % 6].clone()).collect();
            sub.shuffle(&mut rng);
            sets.push(DesignSet { design_id: format!("design_g{g}_{tag}"), items: sub });
        }
    }

    let mut identity_vecs: Vec<Vec<f64>> = positions;
    let mut instance_ids = Vec::new();
    let mut instance_data: Vec<f32> = Vec::new();
    let mut queries = Vec::new();

    // One antipodal noise vector per identity, norm exactly R.
    let view_radius = FIXTURE_SIGMA * (dim as f64).sqrt();
    let view_noise: Vec<Vec<f64>> = (0..total)
        .map(|_| {
            let dir = unit_gaussian_vec(&mut rng, dim, 1.0);
            let len = euclid(&dir, &vec![0.0; dim]).max(1e-9);
            dir.iter().map(|d| d / len * view_radius).collect()
        })
        .collect();

    // Image plan per group: [easy m0-m2], then one easy anchor plus two
    // ambiguous views each.
    for g in 0..FIXTURE_GROUPS {
        let plan: [(usize, Vec<(usize, usize)>); 4] = [
            (0, vec![(0, 0), (1, 0), (2, 0)]),
            (1, vec![(3, 0), (0, 1), (1, 1)]),
            (2, vec![(4, 0), (2, 1), (3, 1)]),
            (3, vec![(5, 0), (4, 1), (5, 1)]),
        ];
        for (img_idx, slots) in plan {
            let image_id = format!("img_g{g}_{img_idx}");
            for (m, view) in slots {
                let ident_global = g * FIXTURE_MEMBERS + m;
                let identity_id = identity_ids[ident_global].clone();
                let sign = if view == 0 { 1.0 } else { -1.0 };
                let vec: Vec<f64> = identity_vecs[ident_global]
                    .iter()
                    .zip(&view_noise[ident_global])
                    .map(|(v, n)| v + sign * n)
                    .collect();
                let instance_id = format!("q_{identity_id}_{view}");
                if view == 1 {
                    // Plant distractors strictly inside the gt radius.
                    let n_distractors = rng.gen_range(5..=7usize);
                    let foreign = (g + 1 + (ident_global % (FIXTURE_GROUPS - 1)))
                        % FIXTURE_GROUPS;
                    for d in 0..n_distractors {
                        let rho = rng.gen_range(0.90..0.98);
                        let dir = unit_gaussian_vec(&mut rng, dim, 1.0);
                        let len = euclid(&dir, &vec![0.0; dim]).max(1e-9);
                        let dvec: Vec<f64> = vec
                            .iter()
                            .zip(&dir)
                            .map(|(x, u)| x + u / len * rho * view_radius)
                            .collect();
                        let did = format!("zdst_{identity_id}_{view}_{d}");
                        entries.push(CatalogEntry {
                            id: did.clone(),
                            category: format!("cat_{:02}", m % FIXTURE_CATEGORIES),
                            styles: Vec::new(),
                        });
                        attribute_of.insert(did.clone(), m % FIXTURE_CATEGORIES);
                        group_of.insert(did.clone(), foreign);
                        // Anchor the distractor's context to the foreign
                        // group via a dedicated design set.
                        let f0 = format!("id_g{foreign}_{:02}", d % FIXTURE_MEMBERS);
                        let f1 =
                            format!("id_g{foreign}_{:02}", (d + 1) % FIXTURE_MEMBERS);
                        sets.push(DesignSet {
                            design_id: format!("design_zd_{did}"),
                            items: vec![did.clone(), f0, f1],
                        });
                        identity_vecs.push(dvec);
                        identity_ids.push(did);
                    }
                }
                instance_data.extend(vec.iter().map(|&v| v as f32));
                instance_ids.push(instance_id.clone());
                queries.push(InstanceQuery {
                    instance_id,
                    image_id: image_id.clone(),
                    category: format!("cat_{:02}", m % FIXTURE_CATEGORIES),
                    gt: identity_id,
                });
            }
        }
    }

    let identity_data: Vec<f32> =
        identity_vecs.iter().flat_map(|v| v.iter().map(|&x| x as f32)).collect();
    Ok(SyntheticDataset {
        catalog: Catalog::new(entries)?,
        identities: EmbeddingMatrix::new(identity_ids, dim, identity_data)?,
        instances: EmbeddingMatrix::new(instance_ids, dim, instance_data)?,
        queries: QuerySet::new(queries)?,
        designs: DesignSetCollection { sets, dropped_small: 0 },
        truth: GroundTruth { attribute_of, group_of },
    })
}

/// Adjusted Rand index between two labelings over the same keys.
///
/// 1.0 means identical partitions up to label permutation; independent
/// partitions score near 0. Trivially equal partitions (both one cluster,
/// or both all singletons) score 1.0 by convention.
pub fn adjusted_rand_index(
    a: &BTreeMap<String, usize>,
    b: &BTreeMap<String, usize>,
) -> Result<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::Validation("labelings cover different keys".into()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let comb2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (key, &la) in a {
        let lb = b[key];
        *table.entry((la, lb)).or_insert(0) += 1;
        *rows.entry(la).or_insert(0) += 1;
        *cols.entry(lb).or_insert(0) += 1;
    }
    let sum_cells: f64 = table.values().map(|&c| comb2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = sum_rows * sum_cols / comb2(n);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max_index - expected))
}
