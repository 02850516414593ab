//! Co-occurrence context embeddings for identities.
//!
//! Identities that appear together in curated design sets should land close
//! in a dedicated context space, whatever they look like. Training follows
//! the classic entity-embedding recipe: for each set, embed the rest of the
//! set as the mean of its vectors, pull the held-out member toward that
//! input, and push sampled non-members away under a cosine margin ranking
//! loss. Serving vectors are l2-normalized f32.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{read_embeddings, write_embeddings, DesignSetCollection, EmbeddingMatrix};

/// How often each identity appears across all design sets.
pub fn occurrence_counts(sets: &DesignSetCollection) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for set in &sets.sets {
        for item in &set.items {
            *counts.entry(item.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Samples vocabulary indices proportionally to occurrence counts.
pub struct UnigramTable {
    cumulative: Vec<u64>,
    total: u64,
}

impl UnigramTable {
    pub fn new(counts: &[u64]) -> Result<Self> {
        let mut cumulative = Vec::with_capacity(counts.len());
        let mut total = 0u64;
        for &c in counts {
            total += c;
            cumulative.push(total);
        }
        if total == 0 {
            return Err(Error::Sampling("unigram table has zero total mass".into()));
        }
        Ok(UnigramTable { cumulative, total })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let r = rng.gen_range(0..self.total);
        // First index whose cumulative count exceeds r.
        self.cumulative.partition_point(|&c| c <= r)
    }
}

/// One training example in vocabulary-index form.
#[derive(Debug, Clone)]
pub struct ContextExample {
    /// Set members other than the positive; the input is their mean vector.
    pub context: Vec<usize>,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity with a degenerate-denominator guard: near-zero vectors
/// compare as orthogonal.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom < 1e-12 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Gradient of `cosine(a, x)` with respect to `x`; `None` when the guard
/// fires and the similarity is constant.
fn cosine_grad_x(a: &[f64], x: &[f64]) -> Option<Vec<f64>> {
    let na = norm(a);
    let nx = norm(x);
    if na * nx < 1e-12 {
        return None;
    }
    let c = dot(a, x) / (na * nx);
    Some(
        a.iter()
            .zip(x)
            .map(|(&av, &xv)| av / (na * nx) - c * xv / (nx * nx))
            .collect(),
    )
}

fn mean_of(vectors: &[Vec<f64>], indices: &[usize]) -> Vec<f64> {
    let dim = vectors[indices[0]].len();
    let mut out = vec![0.0; dim];
    for &i in indices {
        for (o, &v) in out.iter_mut().zip(&vectors[i]) {
            *o += v;
        }
    }
    let inv = 1.0 / indices.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Margin ranking loss of one example: sum over negatives of
/// `max(0, margin - cos(input, pos) + cos(input, neg))`.
pub fn example_loss(vectors: &[Vec<f64>], ex: &ContextExample, margin: f64) -> f64 {
    let input = mean_of(vectors, &ex.context);
    let pos_cos = cosine(&input, &vectors[ex.positive]);
    ex.negatives
        .iter()
        .map(|&n| (margin - pos_cos + cosine(&input, &vectors[n])).max(0.0))
        .sum()
}

/// Loss of one example and its gradient per touched vocabulary index.
///
/// Gradients flow into the positive, every active negative, and each context
/// vector (through the mean, so scaled by `1 / context.len()`). Accumulating
/// into a map keeps repeated indices correct.
pub fn example_gradients(
    vectors: &[Vec<f64>],
    ex: &ContextExample,
    margin: f64,
) -> Result<(f64, HashMap<usize, Vec<f64>>)> {
    if ex.context.is_empty() || ex.negatives.is_empty() {
        return Err(Error::Contract("example needs context and negatives".into()));
    }
    let dim = vectors[ex.positive].len();
    let input = mean_of(vectors, &ex.context);
    let pos = &vectors[ex.positive];
    let pos_cos = cosine(&input, pos);

    let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut grad_input = vec![0.0; dim];
    let add = |grads: &mut HashMap<usize, Vec<f64>>, idx: usize, g: &[f64], scale: f64| {
        let buf = grads.entry(idx).or_insert_with(|| vec![0.0; dim]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += scale * v;
        }
    };

    let mut loss = 0.0;
    let mut active = 0usize;
    for &n in &ex.negatives {
        let term = margin - pos_cos + cosine(&input, &vectors[n]);
        if term > 0.0 {
            loss += term;
            active += 1;
            if let Some(g) = cosine_grad_x(&input, &vectors[n]) {
                add(&mut grads, n, &g, 1.0);
            }
            if let Some(g) = cosine_grad_x(&vectors[n], &input) {
                for (gi, &v) in grad_input.iter_mut().zip(&g) {
                    *gi += v;
                }
            }
        }
    }
    if active > 0 {
        if let Some(g) = cosine_grad_x(&input, pos) {
            add(&mut grads, ex.positive, &g, -(active as f64));
        }
        if let Some(g) = cosine_grad_x(pos, &input) {
            for (gi, &v) in grad_input.iter_mut().zip(&g) {
                *gi -= active as f64 * v;
            }
        }
    }
    let ctx_scale = 1.0 / ex.context.len() as f64;
    for &c in &ex.context {
        add(&mut grads, c, &grad_input, ctx_scale);
    }
    Ok((loss, grads))
}

/// Applies one SGD step for the example; returns the pre-update loss.
pub fn margin_ranking_step(
    vectors: &mut [Vec<f64>],
    ex: &ContextExample,
    margin: f64,
    learning_rate: f64,
) -> Result<f64> {
    let (loss, grads) = example_gradients(vectors, ex, margin)?;
    for (idx, grad) in grads {
        for (v, &g) in vectors[idx].iter_mut().zip(&grad) {
            *v -= learning_rate * g;
        }
    }
    Ok(loss)
}

/// Training controls for the context space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextTrainConfig {
    pub dim: usize,
    pub margin: f64,
    pub negatives: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ContextTrainConfig {
    fn default() -> Self {
        ContextTrainConfig {
            dim: 100,
            margin: 0.2,
            negatives: 5,
            learning_rate: 0.05,
            epochs: 40,
            seed: 0,
        }
    }
}

/// Serving-side context vectors: l2-normalized, f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextModel {
    matrix: EmbeddingMatrix,
}

impl ContextModel {
    pub fn from_matrix(matrix: EmbeddingMatrix) -> Self {
        ContextModel { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn len(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.matrix.row_of(id).is_some()
    }

    pub fn ids(&self) -> &[String] {
        self.matrix.ids()
    }

    pub fn vector(&self, id: &str) -> Result<&[f32]> {
        self.matrix
            .row_of(id)
            .ok_or_else(|| Error::MissingEntity { id: id.to_string() })
    }

    /// Cosine distance `1 - cos` between two stored identities.
    pub fn distance(&self, a: &str, b: &str) -> Result<f64> {
        Ok(context_distance(self.vector(a)?, self.vector(b)?))
    }
}

/// Cosine distance between two raw vectors, guarded like [`cosine`].
pub fn context_distance(a: &[f32], b: &[f32]) -> f64 {
    let pa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let pb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    1.0 - cosine(&pa, &pb)
}

/// A trained context model with its per-epoch mean example loss.
#[derive(Debug, Clone)]
pub struct ContextTrainOutcome {
    pub model: ContextModel,
    pub epoch_losses: Vec<f64>,
}

/// Trains context vectors from design-set co-occurrence.
///
/// Each epoch visits every set once in shuffled order and draws one example
/// from it: a uniformly chosen held-out positive, the remaining members as
/// context, and `negatives` unigram draws rejection-resampled until they
/// fall outside the set. The run is single-threaded and bitwise
/// deterministic for a given config.
pub fn train_context_model(
    sets: &DesignSetCollection,
    config: &ContextTrainConfig,
) -> Result<ContextTrainOutcome> {
    if sets.sets.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.dim == 0 {
        return Err(Error::Config("context dim must be at least 1".into()));
    }
    if config.negatives == 0 {
        return Err(Error::Config("need at least one negative per example".into()));
    }
    if !(config.margin > 0.0) || !(config.learning_rate > 0.0) {
        return Err(Error::Config("margin and learning_rate must be > 0".into()));
    }

    let counts_by_id = occurrence_counts(sets);
    let vocab: Vec<String> = counts_by_id.keys().cloned().collect();
    let index_of: HashMap<&str, usize> =
        vocab.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let counts: Vec<u64> = vocab.iter().map(|id| counts_by_id[id]).collect();
    let table = UnigramTable::new(&counts)?;

    // Pre-resolve sets to indices and reject impossible sampling up front:
    // a set spanning the whole vocabulary leaves nothing to draw negatives
    // from and would spin the rejection loop forever.
    let mut member_indices: Vec<Vec<usize>> = Vec::with_capacity(sets.sets.len());
    for set in &sets.sets {
        if set.items.len() < 2 {
            return Err(Error::Validation(format!(
                "design set {:?} has fewer than two items",
                set.design_id
            )));
        }
        if set.items.len() >= vocab.len() {
            return Err(Error::Sampling(format!(
                "design set {:?} covers the entire vocabulary; no negatives exist",
                set.design_id
            )));
        }
        member_indices.push(set.items.iter().map(|id| index_of[id.as_str()]).collect());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 1.0 / (config.dim as f64).sqrt();
    let mut vectors: Vec<Vec<f64>> = (0..vocab.len())
        .map(|_| (0..config.dim).map(|_| rng.gen_range(-bound..bound)).collect())
        .collect();

    let mut order: Vec<usize> = (0..sets.sets.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &set_idx in &order {
            let members = &member_indices[set_idx];
            let member_set: HashSet<usize> = members.iter().copied().collect();
            let held_out = rng.gen_range(0..members.len());
            let positive = members[held_out];
            let context: Vec<usize> = members
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != held_out)
                .map(|(_, &m)| m)
                .collect();
            let negatives: Vec<usize> = (0..config.negatives)
                .map(|_| loop {
                    let cand = table.sample(&mut rng);
                    if !member_set.contains(&cand) {
                        break cand;
                    }
                })
                .collect();
            let ex = ContextExample { context, positive, negatives };
            loss_sum += margin_ranking_step(&mut vectors, &ex, config.margin, config.learning_rate)?;
        }
        epoch_losses.push(loss_sum / sets.sets.len() as f64);
    }

    // Serving form: unit-normalize at f64, then quantize to f32.
    let mut data = Vec::with_capacity(vocab.len() * config.dim);
    for vec in &vectors {
        let n = norm(vec);
        if n > 0.0 {
            data.extend(vec.iter().map(|&v| (v / n) as f32));
        } else {
            data.extend(std::iter::repeat(0.0f32).take(config.dim));
        }
    }
    let matrix = EmbeddingMatrix::new(vocab, config.dim, data)?;
    Ok(ContextTrainOutcome { model: ContextModel { matrix }, epoch_losses })
}

/// Writes the serving vectors in the binary embedding format.
pub fn save_context<P: AsRef<Path>>(path: P, model: &ContextModel) -> Result<()> {
    write_embeddings(path, &model.matrix)
}

/// Reads a model written by [`save_context`].
pub fn load_context<P: AsRef<Path>>(path: P) -> Result<ContextModel> {
    Ok(ContextModel { matrix: read_embeddings(path)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::DesignSet;

    fn collection(sets: &[(&str, &[&str])]) -> DesignSetCollection {
        DesignSetCollection {
            sets: sets
                .iter()
                .map(|(id, items)| DesignSet {
                    design_id: id.to_string(),
                    items: items.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
            dropped_small: 0,
        }
    }

    #[test]
    fn occurrence_counts_span_sets() {
        let sets = collection(&[("d1", &["a", "b"]), ("d2", &["b", "c"])]);
        let counts = occurrence_counts(&sets);
        assert_eq!(counts["a"], 1);
        assert_eq!(counts["b"], 2);
        assert_eq!(counts["c"], 1);
    }

    #[test]
    fn unigram_sampling_follows_counts() {
        let table = UnigramTable::new(&[1, 0, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut hits = [0usize; 3];
        for _ in 0..4000 {
            hits[table.sample(&mut rng)] += 1;
        }
        assert_eq!(hits[1], 0);
        // Index 2 carries three quarters of the mass.
        assert!(hits[2] > 2700 && hits[2] < 3300, "{hits:?}");
    }

    #[test]
    fn unigram_rejects_zero_mass() {
        assert!(matches!(UnigramTable::new(&[0, 0]), Err(Error::Sampling(_))));
    }

    #[test]
    fn orthogonal_positive_identical_negative_costs_margin_plus_one() {
        // input = context mean = [1, 0]; cos(input, pos) = 0 and
        // cos(input, neg) = 1, so the single hinge term is 0.2 + 1.0.
        let vectors = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let ex = ContextExample { context: vec![0], positive: 1, negatives: vec![2] };
        assert_eq!(example_loss(&vectors, &ex, 0.2), 1.2);
    }

    #[test]
    fn inactive_hinge_contributes_nothing() {
        // Positive aligned with the input, negative opposed: the term
        // margin - 1 + (-1) is clamped to zero.
        let vectors = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![-1.0, 0.0]];
        let ex = ContextExample { context: vec![0], positive: 1, negatives: vec![2] };
        assert_eq!(example_loss(&vectors, &ex, 0.2), 0.0);
        let (loss, grads) = example_gradients(&vectors, &ex, 0.2).unwrap();
        assert_eq!(loss, 0.0);
        // Only zero context gradients remain.
        for g in grads.values() {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dim = 5;
        let vectors: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        // A large margin keeps every hinge term strictly active, so the
        // loss is smooth in a neighborhood of the point.
        let margin = 5.0;
        let ex = ContextExample { context: vec![0, 1], positive: 2, negatives: vec![3, 4, 5] };
        let base = example_loss(&vectors, &ex, margin);
        assert!(base > 0.0);
        let (_, grads) = example_gradients(&vectors, &ex, margin).unwrap();
        let eps = 1e-6;
        for idx in 0..vectors.len() {
            for d in 0..dim {
                let mut plus = vectors.clone();
                plus[idx][d] += eps;
                let mut minus = vectors.clone();
                minus[idx][d] -= eps;
                let numeric =
                    (example_loss(&plus, &ex, margin) - example_loss(&minus, &ex, margin))
                        / (2.0 * eps);
                let analytic = grads.get(&idx).map_or(0.0, |g| g[d]);
                let denom = analytic.abs() + numeric.abs();
                let rel = if denom < 1e-10 { 0.0 } else { (analytic - numeric).abs() / denom };
                assert!(rel < 1e-4, "vector {idx} dim {d}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn repeated_negative_gradients_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vectors: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let single = ContextExample { context: vec![0], positive: 1, negatives: vec![2] };
        let double = ContextExample { context: vec![0], positive: 1, negatives: vec![2, 2] };
        let (_, g1) = example_gradients(&vectors, &single, 5.0).unwrap();
        let (_, g2) = example_gradients(&vectors, &double, 5.0).unwrap();
        for d in 0..4 {
            assert!((g2[&2][d] - 2.0 * g1[&2][d]).abs() < 1e-12);
        }
    }

    #[test]
    fn step_reduces_example_loss() {
        // Positive nearly orthogonal to the input, negatives aligned with
        // it: both hinge terms start active.
        let mut vectors = vec![
            vec![1.0, 0.0, 0.2],
            vec![0.8, 0.3, -0.1],
            vec![0.1, 1.0, 0.0],
            vec![0.9, 0.1, 0.1],
            vec![1.1, -0.2, 0.3],
        ];
        let ex = ContextExample { context: vec![0, 1], positive: 2, negatives: vec![3, 4] };
        let before = example_loss(&vectors, &ex, 0.5);
        assert!(before > 0.5);
        let reported = margin_ranking_step(&mut vectors, &ex, 0.5, 0.05).unwrap();
        assert_eq!(reported, before);
        let after = example_loss(&vectors, &ex, 0.5);
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn training_separates_planted_groups() {
        let sets = collection(&[
            ("a1", &["a0", "a1", "a2"]),
            ("a2", &["a0", "a1", "a2"]),
            ("a3", &["a0", "a2"]),
            ("a4", &["a1", "a2"]),
            ("b1", &["b0", "b1", "b2"]),
            ("b2", &["b0", "b1", "b2"]),
            ("b3", &["b0", "b1"]),
            ("b4", &["b0", "b2"]),
        ]);
        let config = ContextTrainConfig { dim: 16, epochs: 60, seed: 3, ..Default::default() };
        let outcome = train_context_model(&sets, &config).unwrap();
        let model = &outcome.model;
        let ids = ["a0", "a1", "a2", "b0", "b1", "b2"];
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for (i, a) in ids.iter().enumerate() {
            for b in ids.iter().skip(i + 1) {
                let sim = 1.0 - model.distance(a, b).unwrap();
                if a.as_bytes()[0] == b.as_bytes()[0] {
                    intra.push(sim);
                } else {
                    inter.push(sim);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let gap = mean(&intra) - mean(&inter);
        assert!(gap >= 0.2, "intra-inter cosine gap {gap}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let sets = collection(&[
            ("d1", &["a", "b", "c"]),
            ("d2", &["c", "d"]),
            ("d3", &["a", "d", "e"]),
        ]);
        let config = ContextTrainConfig { dim: 12, epochs: 15, seed: 21, ..Default::default() };
        let one = train_context_model(&sets, &config).unwrap();
        let two = train_context_model(&sets, &config).unwrap();
        assert_eq!(one.model, two.model);
        assert_eq!(one.epoch_losses, two.epoch_losses);
        let other = train_context_model(
            &sets,
            &ContextTrainConfig { seed: 22, ..config },
        )
        .unwrap();
        assert_ne!(one.model, other.model);
    }

    #[test]
    fn serving_vectors_are_unit_length() {
        let sets = collection(&[("d1", &["a", "b", "c"]), ("d2", &["c", "d"])]);
        let config = ContextTrainConfig { dim: 10, epochs: 5, seed: 1, ..Default::default() };
        let model = train_context_model(&sets, &config).unwrap().model;
        for id in ["a", "b", "c", "d"] {
            let v = model.vector(id).unwrap();
            let n: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-3, "{id}: norm {n}");
        }
    }

    #[test]
    fn set_covering_vocabulary_is_a_sampling_error() {
        let sets = collection(&[("d1", &["a", "b"])]);
        let config = ContextTrainConfig { dim: 4, epochs: 1, seed: 0, ..Default::default() };
        assert!(matches!(train_context_model(&sets, &config), Err(Error::Sampling(_))));
    }

    #[test]
    fn unknown_identity_is_a_missing_entity() {
        let sets = collection(&[("d1", &["a", "b"]), ("d2", &["c", "d"])]);
        let config = ContextTrainConfig { dim: 4, epochs: 1, seed: 0, ..Default::default() };
        let model = train_context_model(&sets, &config).unwrap().model;
        assert!(matches!(model.vector("zz"), Err(Error::MissingEntity { .. })));
        assert!(matches!(model.distance("a", "zz"), Err(Error::MissingEntity { .. })));
    }

    #[test]
    fn zero_vector_distance_is_one() {
        assert_eq!(context_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn model_round_trips_through_disk() {
        let sets = collection(&[("d1", &["a", "b", "c"]), ("d2", &["c", "d"])]);
        let config = ContextTrainConfig { dim: 8, epochs: 3, seed: 2, ..Default::default() };
        let model = train_context_model(&sets, &config).unwrap().model;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("context.emb");
        save_context(&path, &model).unwrap();
        let loaded = load_context(&path).unwrap();
        assert_eq!(model, loaded);
        assert_eq!(
            model.distance("a", "d").unwrap(),
            loaded.distance("a", "d").unwrap()
        );
    }
}
