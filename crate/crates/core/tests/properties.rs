//! Randomized invariants: whitening decorrelates, search matches a naive
//! oracle, re-ranking respects row permutation and the distance-only
//! collapse, and accuracy metrics stay monotone and equal enumeration.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fsr_core::context::ContextModel;
use fsr_core::eval::evaluate;
use fsr_core::index::{RetrievalMatrix, SearchIndex};
use fsr_core::ingest::{Catalog, CatalogEntry, EmbeddingMatrix, InstanceQuery, QuerySet};
use fsr_core::rerank::{rerank_image, RerankConfig};
use fsr_core::whiten::{apply_zca, fit_zca};

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f32) -> EmbeddingMatrix {
    let ids = (0..n).map(|i| format!("e{i:04}")).collect();
    let data = (0..n * d).map(|_| rng.gen_range(-spread..spread)).collect();
    EmbeddingMatrix::new(ids, d, data).unwrap()
}

/// Builds a ranked fixture: rows of distinct candidates with strictly
/// increasing distances, plus context vectors for a prefix of the
/// candidate pool (the rest exercise the missing-context penalty).
fn random_retrieval(
    rng: &mut ChaCha8Rng,
    rows: usize,
    width: usize,
    pool: usize,
) -> (RetrievalMatrix, ContextModel) {
    let pool_ids: Vec<String> = (0..pool).map(|c| format!("c{c:03}")).collect();
    let mut ids = Vec::new();
    let mut cands = Vec::new();
    let mut dists = Vec::new();
    for r in 0..rows {
        ids.push(format!("q{r:02}"));
        let mut choices = pool_ids.clone();
        for i in (1..choices.len()).rev() {
            choices.swap(i, rng.gen_range(0..=i));
        }
        choices.truncate(width);
        let mut d = 0.0f32;
        let mut row_d = Vec::new();
        for _ in 0..width {
            d += rng.gen_range(0.01..1.0);
            row_d.push(d);
        }
        cands.push(choices);
        dists.push(row_d);
    }
    let matrix = RetrievalMatrix::new(ids, cands, dists, width).unwrap();
    let covered = pool * 2 / 3;
    let dim = 4usize;
    let data = (0..covered * dim).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
    let ctx = EmbeddingMatrix::new(pool_ids[..covered].to_vec(), dim, data).unwrap();
    (matrix, ContextModel::from_matrix(ctx))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn whitening_decorrelates_random_data(seed in 0u64..1_000, n in 40usize..120, d in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, n, d, 3.0);
        let model = fit_zca(&x, 1e-6).unwrap();
        let white = apply_zca(&model, &x).unwrap();
        // Sample covariance of the whitened rows must be the identity.
        let mut mean = vec![0.0f64; d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(white.row(r)) {
                *m += v as f64 / n as f64;
            }
        }
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let mut cov = 0.0f64;
                for r in 0..n {
                    let row = white.row(r);
                    cov += (row[i] as f64 - mean[i]) * (row[j] as f64 - mean[j]);
                }
                cov /= (n - 1) as f64;
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((cov - target).abs());
            }
        }
        prop_assert!(worst < 1e-3, "max covariance deviation {worst}");
    }

    #[test]
    fn search_matches_naive_oracle(seed in 0u64..1_000, n in 1usize..120, d in 1usize..12, k in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, n, d, 2.0);
        let catalog = Catalog::new(
            (0..n)
                .map(|i| CatalogEntry {
                    id: format!("e{i:04}"),
                    category: format!("cat_{}", i % 3),
                    styles: Vec::new(),
                })
                .collect(),
        )
        .unwrap();
        let index = SearchIndex::build(&x, &catalog).unwrap();
        let query: Vec<f32> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let hits = index.search_topk(&query, k, None).unwrap();

        let mut oracle: Vec<(f64, String)> = (0..n)
            .map(|r| {
                let dist: f64 = x
                    .row(r)
                    .iter()
                    .zip(&query)
                    .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
                    .sum::<f64>()
                    .sqrt();
                (dist, x.id(r).to_string())
            })
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        oracle.truncate(k);

        prop_assert_eq!(hits.len(), oracle.len());
        for (hit, (dist, id)) in hits.iter().zip(&oracle) {
            prop_assert_eq!(&hit.id, id);
            prop_assert!((hit.distance as f64 - dist).abs() <= 1e-5);
        }
    }

    #[test]
    fn rerank_rows_commute_with_permutation(seed in 0u64..1_000, rows in 2usize..5, width in 4usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (matrix, ctx) = random_retrieval(&mut rng, rows, width, width + 4);
        let config = RerankConfig {
            alpha: rng.gen_range(0.0..=1.0),
            k_out: rng.gen_range(2..=width),
            ..Default::default()
        };
        let forward = rerank_image(&matrix, &ctx, &config).unwrap();

        let mut order: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let permuted = matrix.select_rows(&order).unwrap();
        let back = rerank_image(&permuted, &ctx, &config).unwrap();

        for row in 0..rows {
            let id = forward.instance_id(row);
            let other = back.row_of(id).expect("same instances");
            prop_assert_eq!(forward.candidates(row), back.candidates(other), "instance {}", id);
            prop_assert_eq!(forward.scores(row), back.scores(other));
        }
    }

    #[test]
    fn rerank_at_alpha_one_keeps_distance_order(seed in 0u64..1_000, rows in 1usize..5, width in 3usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (matrix, ctx) = random_retrieval(&mut rng, rows, width, width + 4);
        let config = RerankConfig { alpha: 1.0, k_out: width, ..Default::default() };
        let out = rerank_image(&matrix, &ctx, &config).unwrap();
        for row in 0..rows {
            let orow = out.row_of(matrix.instance_id(row)).unwrap();
            prop_assert_eq!(out.candidates(orow), matrix.candidates(row));
            let expected: Vec<usize> = (0..width).collect();
            prop_assert_eq!(out.source_columns(orow), &expected[..]);
        }
    }

    #[test]
    fn accuracy_is_monotone_and_set_matches_enumeration(seed in 0u64..1_000, queries in 4usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = 10usize;
        let mut ids = Vec::new();
        let mut cands = Vec::new();
        let mut dists = Vec::new();
        let mut queryset = Vec::new();
        for q in 0..queries {
            let instance = format!("q{q:03}");
            let gt = format!("e{:03}", rng.gen_range(0..width + 5));
            let mut row: Vec<String> = (0..width + 5).map(|c| format!("e{c:03}")).collect();
            for i in (1..row.len()).rev() {
                row.swap(i, rng.gen_range(0..=i));
            }
            row.truncate(width);
            let mut d = 0.0f32;
            let row_d: Vec<f32> = (0..width)
                .map(|_| {
                    d += rng.gen_range(0.01..1.0);
                    d
                })
                .collect();
            ids.push(instance.clone());
            cands.push(row);
            dists.push(row_d);
            queryset.push(InstanceQuery {
                instance_id: instance,
                image_id: format!("img{:02}", q / 3),
                category: format!("cat{}", q % 2),
                gt,
            });
        }
        let matrix = RetrievalMatrix::new(ids, cands, dists, width).unwrap();
        let queries = QuerySet::new(queryset).unwrap();
        let ks = [1usize, 3, 5, 10];
        let report = evaluate(&matrix, &queries, &ks).unwrap();

        let overall = |ki: usize| -> f64 {
            let mut hits = 0.0;
            let mut total = 0.0;
            for (cat, accs) in &report.per_category {
                let n = report.category_counts[cat] as f64;
                hits += accs[ki] * n;
                total += n;
            }
            if total == 0.0 { 0.0 } else { hits / total }
        };
        for ki in 1..ks.len() {
            prop_assert!(report.macc[ki] >= report.macc[ki - 1] - 1e-12);
            prop_assert!(overall(ki) >= overall(ki - 1) - 1e-12, "overall accuracy dipped at k index {ki}");
            prop_assert!(report.set_acc[ki] >= report.set_acc[ki - 1] - 1e-12);
            for accs in report.per_category.values() {
                prop_assert!(accs[ki] >= accs[ki - 1] - 1e-12);
            }
        }
        // Set accuracy equals direct enumeration: an image counts at k only
        // when every one of its instances has its gt in the top k. (It is
        // not bounded by instance accuracy: a small all-hit image outweighs
        // a large all-miss one.)
        for (ki, &k) in ks.iter().enumerate() {
            let mut correct = 0usize;
            let mut evaluated = 0usize;
            for (_, rows) in queries.by_image() {
                evaluated += 1;
                let all = rows.iter().all(|&r| {
                    let q = &queries.queries()[r];
                    let row = matrix.row_of(&q.instance_id).unwrap();
                    matrix.candidates(row)[..k].contains(&q.gt)
                });
                correct += usize::from(all);
            }
            prop_assert!(
                report.set_acc[ki] == correct as f64 / evaluated as f64,
                "set accuracy diverges from enumeration at k index {ki}"
            );
        }
    }
}
