//! Exhaustive Euclidean nearest-identity search.
//!
//! The catalog is small enough that retrieval scans every identity: vectors
//! live in one contiguous row-major buffer, and per-candidate distance
//! accumulates squared differences directly (the expanded dot-product form
//! cancels catastrophically when a query nearly coincides with an identity).
//! Results are exact; ties on distance are broken by id ascending on every
//! code path, so output is independent of thread count and scan order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Catalog, EmbeddingMatrix};

/// Dense scan index over identity embeddings.
#[derive(Debug, Clone)]
pub struct SearchIndex {
    ids: Vec<String>,
    categories: Vec<String>,
    vectors: Vec<f32>,
    dim: usize,
}

/// One retrieved candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub id: String,
    pub distance: f32,
}

/// Eight-lane squared Euclidean distance: fixed summation order
/// (deterministic) that the optimizer can keep in SIMD registers.
#[inline]
fn dist2(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for lane in 0..8 {
            let d = xa[lane] - xb[lane];
            acc[lane] += d * d;
        }
    }
    let mut s = 0.0f32;
    for lane in 0..8 {
        s += acc[lane];
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        s += d * d;
    }
    s
}

impl SearchIndex {
    /// Builds the index; every embedding id must appear in the catalog.
    pub fn build(x: &EmbeddingMatrix, catalog: &Catalog) -> Result<Self> {
        let mut categories = Vec::with_capacity(x.len());
        for id in x.ids() {
            let category = catalog
                .category_of(id)
                .ok_or_else(|| Error::MissingEntity { id: id.clone() })?;
            categories.push(category.to_string());
        }
        Ok(SearchIndex {
            ids: x.ids().to_vec(),
            categories,
            vectors: x.data().to_vec(),
            dim: x.dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Exact top-k by Euclidean distance, ascending, ties by id ascending.
    ///
    /// With `category_filter` set, only identities of that category are
    /// scanned; a filter that matches nothing (or an empty index) is an
    /// [`Error::EmptyPool`]. Returns `min(k, pool size)` hits.
    pub fn search_topk(
        &self,
        query: &[f32],
        k: usize,
        category_filter: Option<&str>,
    ) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!(
                "query length {} does not match index dim {}",
                query.len(),
                self.dim
            )));
        }
        // Sorted scoreboard of at most k (squared distance, row) entries;
        // candidates that report the same distance tie here and fall through
        // to the id order.
        let mut best: Vec<(f32, u32)> = Vec::with_capacity(k + 1);
        let mut scanned = 0usize;
        for row in 0..self.ids.len() {
            if let Some(filter) = category_filter {
                if self.categories[row] != filter {
                    continue;
                }
            }
            scanned += 1;
            let v = &self.vectors[row * self.dim..(row + 1) * self.dim];
            let d2 = dist2(query, v);
            if best.len() == k {
                let &(wd, wrow) = best.last().unwrap();
                let beats_worst = d2 < wd
                    || (d2 == wd && self.ids[row] < self.ids[wrow as usize]);
                if !beats_worst {
                    continue;
                }
                best.pop();
            }
            let pos = best
                .binary_search_by(|&(pd, prow)| {
                    pd.total_cmp(&d2)
                        .then_with(|| self.ids[prow as usize].cmp(&self.ids[row]))
                })
                .unwrap_err();
            best.insert(pos, (d2, row as u32));
        }
        if scanned == 0 {
            let what = match category_filter {
                Some(filter) => format!("no identities of category {filter:?} in index"),
                None => "index is empty".into(),
            };
            return Err(Error::EmptyPool(what));
        }
        Ok(best
            .into_iter()
            .map(|(d2, row)| SearchHit {
                id: self.ids[row as usize].clone(),
                distance: d2.sqrt(),
            })
            .collect())
    }

    /// Searches many queries, in parallel, preserving input order.
    ///
    /// `filters` (when given) must be one category per query row. Rows that
    /// fail are collected into the outcome's error list instead of aborting
    /// the batch.
    pub fn batch_search(
        &self,
        queries: &EmbeddingMatrix,
        filters: Option<&[String]>,
        k: usize,
    ) -> Result<BatchSearchOutcome> {
        if let Some(f) = filters {
            if f.len() != queries.len() {
                return Err(Error::Shape(format!(
                    "{} filters for {} queries",
                    f.len(),
                    queries.len()
                )));
            }
        }
        let rows: Vec<(usize, Result<Vec<SearchHit>>)> = (0..queries.len())
            .into_par_iter()
            .map(|row| {
                let filter = filters.map(|f| f[row].as_str());
                (row, self.search_topk(queries.row(row), k, filter))
            })
            .collect();

        let mut instance_ids = Vec::new();
        let mut candidates = Vec::new();
        let mut distances = Vec::new();
        let mut row_errors = Vec::new();
        for (row, outcome) in rows {
            let instance = queries.id(row).to_string();
            match outcome {
                Ok(hits) => {
                    instance_ids.push(instance);
                    candidates.push(hits.iter().map(|h| h.id.clone()).collect());
                    distances.push(hits.iter().map(|h| h.distance).collect());
                }
                Err(err) => row_errors.push((instance, err)),
            }
        }
        let matrix = RetrievalMatrix::new(instance_ids, candidates, distances, k)?;
        Ok(BatchSearchOutcome { matrix, row_errors })
    }
}

/// Batch result: successful rows plus per-row failures.
#[derive(Debug)]
pub struct BatchSearchOutcome {
    pub matrix: RetrievalMatrix,
    pub row_errors: Vec<(String, Error)>,
}

/// Ranked candidate lists, one row per query instance.
///
/// Row invariants: candidates and distances are aligned, at most `k` per
/// row, and distances are non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMatrix {
    instance_ids: Vec<String>,
    candidates: Vec<Vec<String>>,
    distances: Vec<Vec<f32>>,
    k: usize,
    by_instance: HashMap<String, usize>,
}

impl RetrievalMatrix {
    pub fn new(
        instance_ids: Vec<String>,
        candidates: Vec<Vec<String>>,
        distances: Vec<Vec<f32>>,
        k: usize,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if candidates.len() != instance_ids.len() || distances.len() != instance_ids.len() {
            return Err(Error::Shape("rows misaligned with instance ids".into()));
        }
        for (row, (cand, dist)) in candidates.iter().zip(&distances).enumerate() {
            if cand.len() != dist.len() {
                return Err(Error::Shape(format!(
                    "row {row}: {} candidates but {} distances",
                    cand.len(),
                    dist.len()
                )));
            }
            if cand.is_empty() || cand.len() > k {
                return Err(Error::Shape(format!(
                    "row {row}: {} candidates outside 1..={k}",
                    cand.len()
                )));
            }
            if dist.iter().any(|d| !d.is_finite() || *d < 0.0) {
                return Err(Error::Data(format!("row {row}: invalid distance")));
            }
            if dist.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Data(format!("row {row}: distances not ascending")));
            }
        }
        let mut by_instance = HashMap::with_capacity(instance_ids.len());
        for (row, id) in instance_ids.iter().enumerate() {
            if by_instance.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateId { id: id.clone() });
            }
        }
        Ok(RetrievalMatrix { instance_ids, candidates, distances, k, by_instance })
    }

    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }

    /// Requested candidate count per row (rows may be shorter when the
    /// scanned pool was smaller).
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    pub fn instance_id(&self, row: usize) -> &str {
        &self.instance_ids[row]
    }

    pub fn candidates(&self, row: usize) -> &[String] {
        &self.candidates[row]
    }

    pub fn distances(&self, row: usize) -> &[f32] {
        &self.distances[row]
    }

    pub fn row_of(&self, instance_id: &str) -> Option<usize> {
        self.by_instance.get(instance_id).copied()
    }

    /// Sub-matrix of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<RetrievalMatrix> {
        RetrievalMatrix::new(
            rows.iter().map(|&r| self.instance_ids[r].clone()).collect(),
            rows.iter().map(|&r| self.candidates[r].clone()).collect(),
            rows.iter().map(|&r| self.distances[r].clone()).collect(),
            self.k,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct RetrievalRecord {
    instance: String,
    candidates: Vec<String>,
    distances: Vec<f32>,
}

/// Writes a retrieval matrix as line-delimited JSON records.
pub fn save_retrieval<P: AsRef<Path>>(path: P, matrix: &RetrievalMatrix) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    for row in 0..matrix.len() {
        let record = RetrievalRecord {
            instance: matrix.instance_id(row).to_string(),
            candidates: matrix.candidates(row).to_vec(),
            distances: matrix.distances(row).to_vec(),
        };
        serde_json::to_writer(&mut writer, &record).map_err(|e| Error::Format(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Loads a retrieval matrix written by [`save_retrieval`]. `k` is recovered
/// as the widest row.
pub fn load_retrieval<P: AsRef<Path>>(path: P) -> Result<RetrievalMatrix> {
    let reader = BufReader::new(File::open(path)?);
    let mut instance_ids = Vec::new();
    let mut candidates = Vec::new();
    let mut distances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RetrievalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        instance_ids.push(record.instance);
        candidates.push(record.candidates);
        distances.push(record.distances);
    }
    let k = candidates.iter().map(Vec::len).max().unwrap_or(1);
    RetrievalMatrix::new(instance_ids, candidates, distances, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::CatalogEntry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_fixture() -> (EmbeddingMatrix, Catalog) {
        let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let data = vec![0.0, 0.0, 3.0, 4.0, -1.0, 1.0];
        let x = EmbeddingMatrix::new(ids, 2, data).unwrap();
        let catalog = Catalog::new(vec![
            CatalogEntry { id: "a".into(), category: "chair".into(), styles: vec![] },
            CatalogEntry { id: "b".into(), category: "table".into(), styles: vec![] },
            CatalogEntry { id: "c".into(), category: "chair".into(), styles: vec![] },
        ])
        .unwrap();
        (x, catalog)
    }

    #[test]
    fn query_equal_to_identity_ranks_it_first_at_zero() {
        let (x, catalog) = small_fixture();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        let hits = index.search_topk(&[3.0, 4.0], 3, None).unwrap();
        assert_eq!(hits[0].id, "b");
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(hits.len(), 3);
        assert!(hits.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn k_larger_than_pool_returns_all_sorted() {
        let (x, catalog) = small_fixture();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        let hits = index.search_topk(&[0.0, 0.0], 10, None).unwrap();
        assert_eq!(hits.len(), 3);
        let ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c", "b"]);
    }

    #[test]
    fn category_filter_restricts_pool() {
        let (x, catalog) = small_fixture();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        let hits = index.search_topk(&[3.0, 4.0], 5, Some("chair")).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
    }

    #[test]
    fn unmatched_filter_is_empty_pool() {
        let (x, catalog) = small_fixture();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        assert!(matches!(
            index.search_topk(&[0.0, 0.0], 1, Some("sofa")),
            Err(Error::EmptyPool(_))
        ));
    }

    #[test]
    fn empty_index_errs_on_search() {
        let x = EmbeddingMatrix::new(vec![], 2, vec![]).unwrap();
        let catalog = Catalog::new(vec![]).unwrap();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        assert!(index.is_empty());
        assert!(matches!(index.search_topk(&[0.0, 0.0], 1, None), Err(Error::EmptyPool(_))));
    }

    #[test]
    fn unknown_id_fails_index_build() {
        let (x, _) = small_fixture();
        let catalog = Catalog::new(vec![CatalogEntry {
            id: "a".into(),
            category: "chair".into(),
            styles: vec![],
        }])
        .unwrap();
        assert!(matches!(
            SearchIndex::build(&x, &catalog),
            Err(Error::MissingEntity { .. })
        ));
    }

    #[test]
    fn zero_k_is_a_config_error() {
        let (x, catalog) = small_fixture();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        assert!(matches!(index.search_topk(&[0.0, 0.0], 0, None), Err(Error::Config(_))));
    }

    #[test]
    fn dim_mismatch_is_a_shape_error() {
        let (x, catalog) = small_fixture();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        assert!(matches!(index.search_topk(&[0.0], 1, None), Err(Error::Shape(_))));
    }

    #[test]
    fn equal_distances_break_ties_by_id() {
        let ids = vec!["zz".to_string(), "aa".to_string(), "mm".to_string()];
        // All three identities at the same distance from the origin query.
        let data = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0];
        let x = EmbeddingMatrix::new(ids, 2, data).unwrap();
        let catalog = Catalog::new(
            ["zz", "aa", "mm"]
                .iter()
                .map(|id| CatalogEntry {
                    id: id.to_string(),
                    category: "chair".into(),
                    styles: vec![],
                })
                .collect(),
        )
        .unwrap();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        let hits = index.search_topk(&[0.0, 0.0], 2, None).unwrap();
        let got: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(got, vec!["aa", "mm"]);
    }

    /// Naive oracle: direct per-coordinate subtraction, full sort.
    fn oracle_topk(
        x: &EmbeddingMatrix,
        query: &[f32],
        k: usize,
        filter: Option<(&Catalog, &str)>,
    ) -> Vec<(String, f32)> {
        let mut scored: Vec<(String, f32)> = (0..x.len())
            .filter(|&row| match filter {
                Some((catalog, cat)) => catalog.category_of(x.id(row)) == Some(cat),
                None => true,
            })
            .map(|row| {
                let mut acc = 0.0f64;
                for (&a, &b) in x.row(row).iter().zip(query) {
                    let d = a as f64 - b as f64;
                    acc += d * d;
                }
                (x.id(row).to_string(), acc.sqrt() as f32)
            })
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    #[test]
    fn random_corpus_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 200;
        let dim = 16;
        let ids: Vec<String> = (0..n).map(|i| format!("id_{i:05}")).collect();
        let data: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = EmbeddingMatrix::new(ids.clone(), dim, data).unwrap();
        let catalog = Catalog::new(
            ids.iter()
                .enumerate()
                .map(|(i, id)| CatalogEntry {
                    id: id.clone(),
                    category: format!("cat{}", i % 3),
                    styles: vec![],
                })
                .collect(),
        )
        .unwrap();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        for q in 0..50 {
            let query: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            for k in [1usize, 5, 10] {
                let hits = index.search_topk(&query, k, None).unwrap();
                let expected = oracle_topk(&x, &query, k, None);
                let got: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
                let want: Vec<&str> = expected.iter().map(|(id, _)| id.as_str()).collect();
                assert_eq!(got, want, "query {q} k {k}");
                for (hit, (_, d)) in hits.iter().zip(&expected) {
                    assert!(
                        (hit.distance - d).abs() < 1e-5,
                        "query {q}: {} vs {}",
                        hit.distance,
                        d
                    );
                }
            }
            // Filtered variant against the same oracle.
            let hits = index.search_topk(&query, 5, Some("cat1")).unwrap();
            let expected = oracle_topk(&x, &query, 5, Some((&catalog, "cat1")));
            let got: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
            let want: Vec<&str> = expected.iter().map(|(id, _)| id.as_str()).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn batch_search_preserves_order_and_collects_row_errors() {
        let (x, catalog) = small_fixture();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        let queries = EmbeddingMatrix::new(
            vec!["q0".into(), "q1".into(), "q2".into()],
            2,
            vec![3.0, 4.0, 0.0, 0.0, 1.0, 1.0],
        )
        .unwrap();
        let filters = vec!["table".to_string(), "sofa".to_string(), "chair".to_string()];
        let outcome = index.batch_search(&queries, Some(&filters), 2).unwrap();
        assert_eq!(outcome.matrix.len(), 2);
        assert_eq!(outcome.matrix.instance_id(0), "q0");
        assert_eq!(outcome.matrix.candidates(0), &["b".to_string()]);
        assert_eq!(outcome.matrix.instance_id(1), "q2");
        assert_eq!(outcome.row_errors.len(), 1);
        assert_eq!(outcome.row_errors[0].0, "q1");
        assert!(matches!(outcome.row_errors[0].1, Error::EmptyPool(_)));
    }

    #[test]
    fn batch_search_is_identical_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 64;
        let dim = 8;
        let ids: Vec<String> = (0..n).map(|i| format!("id_{i:03}")).collect();
        let data: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = EmbeddingMatrix::new(ids.clone(), dim, data).unwrap();
        let catalog = Catalog::new(
            ids.iter()
                .map(|id| CatalogEntry { id: id.clone(), category: "c".into(), styles: vec![] })
                .collect(),
        )
        .unwrap();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        let qdata: Vec<f32> = (0..20 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let queries = EmbeddingMatrix::new(
            (0..20).map(|i| format!("q{i}")).collect(),
            dim,
            qdata,
        )
        .unwrap();

        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| index.batch_search(&queries, None, 5).unwrap())
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one.matrix, four.matrix);
    }

    #[test]
    fn retrieval_matrix_round_trips_through_jsonl() {
        let matrix = RetrievalMatrix::new(
            vec!["q0".into(), "q1".into()],
            vec![vec!["a".into(), "b".into()], vec!["c".into()]],
            vec![vec![0.5, 1.25], vec![0.0]],
            2,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("retrieval.jsonl");
        save_retrieval(&path, &matrix).unwrap();
        let loaded = load_retrieval(&path).unwrap();
        assert_eq!(loaded, matrix);
    }

    #[test]
    fn retrieval_matrix_rejects_descending_distances() {
        let err = RetrievalMatrix::new(
            vec!["q0".into()],
            vec![vec!["a".into(), "b".into()]],
            vec![vec![1.0, 0.5]],
            2,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
