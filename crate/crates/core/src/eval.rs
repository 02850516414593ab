//! Retrieval benchmark metrics.
//!
//! Two views of quality: per-category top-k instance accuracy with its
//! category-averaged mean (each category votes once, however many queries
//! it has), and set accuracy (an image counts only when every one of its
//! instances ranks its ground-truth identity within its own top k).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::RetrievalMatrix;
use crate::ingest::QuerySet;
use crate::rerank::RerankedMatrix;

/// Anything that ranks candidate identities per instance, best first.
pub trait RankedResults {
    fn len(&self) -> usize;
    fn instance_id(&self, row: usize) -> &str;
    fn ranked(&self, row: usize) -> &[String];
    fn row_of(&self, instance_id: &str) -> Option<usize>;
    /// Widest row; every row holds between 1 and this many candidates.
    fn width(&self) -> usize;
}

impl RankedResults for RetrievalMatrix {
    fn len(&self) -> usize {
        self.len()
    }

    fn instance_id(&self, row: usize) -> &str {
        self.instance_id(row)
    }

    fn ranked(&self, row: usize) -> &[String] {
        self.candidates(row)
    }

    fn row_of(&self, instance_id: &str) -> Option<usize> {
        self.row_of(instance_id)
    }

    fn width(&self) -> usize {
        self.k()
    }
}

impl RankedResults for RerankedMatrix {
    fn len(&self) -> usize {
        self.len()
    }

    fn instance_id(&self, row: usize) -> &str {
        self.instance_id(row)
    }

    fn ranked(&self, row: usize) -> &[String] {
        self.candidates(row)
    }

    fn row_of(&self, instance_id: &str) -> Option<usize> {
        self.row_of(instance_id)
    }

    fn width(&self) -> usize {
        self.k()
    }
}

fn validate_ks<R: RankedResults>(results: &R, ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::Config("need at least one k".into()));
    }
    for &k in ks {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if k > results.width() {
            return Err(Error::Config(format!(
                "k {k} exceeds result width {}",
                results.width()
            )));
        }
    }
    Ok(())
}

fn hit_at(ranked: &[String], gt: &str, k: usize) -> bool {
    ranked.iter().take(k).any(|c| c == gt)
}

/// Per-category instance accuracy at each k, plus the unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAccuracy {
    pub ks: Vec<usize>,
    /// Category to accuracy per k, aligned with `ks`.
    pub per_category: BTreeMap<String, Vec<f64>>,
    pub category_counts: BTreeMap<String, usize>,
    /// Unweighted mean over categories with at least one query.
    pub macc: Vec<f64>,
    pub instances: usize,
}

/// Computes top-k instance accuracy. Every result row must have a query
/// carrying its ground truth.
pub fn instance_accuracy<R: RankedResults>(
    results: &R,
    queries: &QuerySet,
    ks: &[usize],
) -> Result<InstanceAccuracy> {
    validate_ks(results, ks)?;
    let mut hits: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for row in 0..results.len() {
        let instance_id = results.instance_id(row);
        let query = queries.get(instance_id).ok_or_else(|| {
            Error::Validation(format!("result row {instance_id:?} has no query"))
        })?;
        let ranked = results.ranked(row);
        let per_k = hits.entry(query.category.clone()).or_insert_with(|| vec![0; ks.len()]);
        for (slot, &k) in ks.iter().enumerate() {
            if hit_at(ranked, &query.gt, k) {
                per_k[slot] += 1;
            }
        }
        *counts.entry(query.category.clone()).or_insert(0) += 1;
    }
    let per_category: BTreeMap<String, Vec<f64>> = hits
        .iter()
        .map(|(cat, per_k)| {
            let total = counts[cat] as f64;
            (cat.clone(), per_k.iter().map(|&h| h as f64 / total).collect())
        })
        .collect();
    let macc: Vec<f64> = (0..ks.len())
        .map(|slot| {
            if per_category.is_empty() {
                0.0
            } else {
                per_category.values().map(|acc| acc[slot]).sum::<f64>()
                    / per_category.len() as f64
            }
        })
        .collect();
    Ok(InstanceAccuracy {
        ks: ks.to_vec(),
        per_category,
        category_counts: counts,
        macc,
        instances: results.len(),
    })
}

/// Set accuracy at each k, plus how many images were evaluated or skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAccuracy {
    pub ks: Vec<usize>,
    pub set_acc: Vec<f64>,
    pub images_evaluated: usize,
    pub images_skipped: usize,
}

/// Set accuracy over explicit image groups. A group lists the instance ids
/// belonging to one image; empty groups are skipped (and counted), missing
/// instances are an error.
pub fn set_accuracy_grouped<R: RankedResults>(
    results: &R,
    groups: &[(String, Vec<String>)],
    queries: &QuerySet,
    ks: &[usize],
) -> Result<SetAccuracy> {
    validate_ks(results, ks)?;
    let mut correct = vec![0usize; ks.len()];
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (image_id, instance_ids) in groups {
        if instance_ids.is_empty() {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        for (slot, &k) in ks.iter().enumerate() {
            let all_hit = instance_ids.iter().try_fold(true, |acc, instance_id| {
                let row = results.row_of(instance_id).ok_or_else(|| {
                    Error::Validation(format!(
                        "image {image_id:?}: instance {instance_id:?} missing from results"
                    ))
                })?;
                let query = queries.get(instance_id).ok_or_else(|| {
                    Error::Validation(format!("instance {instance_id:?} has no query"))
                })?;
                Ok::<bool, Error>(acc && hit_at(results.ranked(row), &query.gt, k))
            })?;
            if all_hit {
                correct[slot] += 1;
            }
        }
    }
    let set_acc = correct
        .iter()
        .map(|&c| if evaluated == 0 { 0.0 } else { c as f64 / evaluated as f64 })
        .collect();
    Ok(SetAccuracy {
        ks: ks.to_vec(),
        set_acc,
        images_evaluated: evaluated,
        images_skipped: skipped,
    })
}

/// Set accuracy with images derived from the query set.
pub fn set_accuracy<R: RankedResults>(
    results: &R,
    queries: &QuerySet,
    ks: &[usize],
) -> Result<SetAccuracy> {
    let groups: Vec<(String, Vec<String>)> = queries
        .by_image()
        .into_iter()
        .map(|(image, rows)| {
            let ids = rows
                .iter()
                .map(|&r| queries.queries()[r].instance_id.clone())
                .collect();
            (image, ids)
        })
        .collect();
    set_accuracy_grouped(results, &groups, queries, ks)
}

/// Full benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub per_category: BTreeMap<String, Vec<f64>>,
    pub category_counts: BTreeMap<String, usize>,
    pub macc: Vec<f64>,
    pub set_acc: Vec<f64>,
    pub instances: usize,
    pub images_evaluated: usize,
    pub images_skipped: usize,
}

/// Runs both metric families over one result matrix.
pub fn evaluate<R: RankedResults>(
    results: &R,
    queries: &QuerySet,
    ks: &[usize],
) -> Result<EvalReport> {
    let inst = instance_accuracy(results, queries, ks)?;
    let sets = set_accuracy(results, queries, ks)?;
    Ok(EvalReport {
        ks: inst.ks,
        per_category: inst.per_category,
        category_counts: inst.category_counts,
        macc: inst.macc,
        set_acc: sets.set_acc,
        instances: inst.instances,
        images_evaluated: sets.images_evaluated,
        images_skipped: sets.images_skipped,
    })
}

/// Writes a report as pretty JSON; maps are ordered, so equal reports
/// serialize byte-identically.
pub fn write_report<P: AsRef<Path>>(path: P, report: &EvalReport) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut writer, report)
        .map_err(|e| Error::Format(e.to_string()))?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

/// Reads a report written by [`write_report`].
pub fn load_report<P: AsRef<Path>>(path: P) -> Result<EvalReport> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    serde_json::from_reader(reader).map_err(|e| Error::Format(e.to_string()))
}

/// Renders the report as a flat text table: one category per row, one
/// accuracy column per k, then the mean and set rows.
pub fn format_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let header: Vec<String> = report.ks.iter().map(|k| format!("ACC@{k}")).collect();
    out.push_str(&format!("{:<16} {:>8} {}\n", "category", "queries", header.join("  ")));
    for (cat, accs) in &report.per_category {
        let cells: Vec<String> = accs.iter().map(|a| format!("{a:>6.4}")).collect();
        out.push_str(&format!(
            "{:<16} {:>8} {}\n",
            cat, report.category_counts[cat],
            cells.join("  ")
        ));
    }
    let macc: Vec<String> = report.macc.iter().map(|a| format!("{a:>6.4}")).collect();
    out.push_str(&format!("{:<16} {:>8} {}\n", "MACC", report.instances, macc.join("  ")));
    let set: Vec<String> = report.set_acc.iter().map(|a| format!("{a:>6.4}")).collect();
    out.push_str(&format!(
        "{:<16} {:>8} {}\n",
        "SET", report.images_evaluated,
        set.join("  ")
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::InstanceQuery;

    fn queries(rows: &[(&str, &str, &str, &str)]) -> QuerySet {
        QuerySet::new(
            rows.iter()
                .map(|(iid, img, cat, gt)| InstanceQuery {
                    instance_id: iid.to_string(),
                    image_id: img.to_string(),
                    category: cat.to_string(),
                    gt: gt.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn results(rows: &[(&str, &[&str])]) -> RetrievalMatrix {
        let ids: Vec<String> = rows.iter().map(|(id, _)| id.to_string()).collect();
        let candidates: Vec<Vec<String>> = rows
            .iter()
            .map(|(_, cands)| cands.iter().map(|c| c.to_string()).collect())
            .collect();
        let distances: Vec<Vec<f32>> = rows
            .iter()
            .map(|(_, cands)| (0..cands.len()).map(|i| i as f32 * 0.1).collect())
            .collect();
        let k = candidates.iter().map(Vec::len).max().unwrap();
        RetrievalMatrix::new(ids, candidates, distances, k).unwrap()
    }

    #[test]
    fn rank_one_everywhere_scores_one() {
        let qs = queries(&[
            ("q0", "img0", "chair", "a"),
            ("q1", "img0", "table", "b"),
        ]);
        let rs = results(&[("q0", &["a", "x"]), ("q1", &["b", "y"])]);
        let report = evaluate(&rs, &qs, &[1, 2]).unwrap();
        assert_eq!(report.per_category["chair"], vec![1.0, 1.0]);
        assert_eq!(report.per_category["table"], vec![1.0, 1.0]);
        assert_eq!(report.macc, vec![1.0, 1.0]);
        assert_eq!(report.set_acc, vec![1.0, 1.0]);
    }

    #[test]
    fn macc_is_unweighted_across_unequal_categories() {
        // Three chair queries all hit, one table query misses: weighted
        // accuracy would be 0.75, the category mean must be 0.5.
        let qs = queries(&[
            ("q0", "img0", "chair", "a"),
            ("q1", "img1", "chair", "b"),
            ("q2", "img2", "chair", "c"),
            ("q3", "img3", "table", "d"),
        ]);
        let rs = results(&[
            ("q0", &["a"]),
            ("q1", &["b"]),
            ("q2", &["c"]),
            ("q3", &["x"]),
        ]);
        let acc = instance_accuracy(&rs, &qs, &[1]).unwrap();
        assert_eq!(acc.per_category["chair"], vec![1.0]);
        assert_eq!(acc.per_category["table"], vec![0.0]);
        assert_eq!(acc.macc, vec![0.5]);
        assert_eq!(acc.category_counts["chair"], 3);
    }

    #[test]
    fn rank_six_misses_five_hits_ten() {
        let qs = queries(&[("q0", "img0", "chair", "gt")]);
        let cands: Vec<String> = (0..10)
            .map(|i| if i == 5 { "gt".to_string() } else { format!("c{i}") })
            .collect();
        let refs: Vec<&str> = cands.iter().map(String::as_str).collect();
        let rs = results(&[("q0", &refs)]);
        let acc = instance_accuracy(&rs, &qs, &[5, 10]).unwrap();
        assert_eq!(acc.per_category["chair"], vec![0.0, 1.0]);
    }

    #[test]
    fn set_accuracy_requires_every_instance_hit() {
        // img0: both instances hit at 1. img1: one instance needs k=2.
        let qs = queries(&[
            ("q0", "img0", "chair", "a"),
            ("q1", "img0", "table", "b"),
            ("q2", "img1", "chair", "c"),
            ("q3", "img1", "table", "d"),
        ]);
        let rs = results(&[
            ("q0", &["a", "x"]),
            ("q1", &["b", "y"]),
            ("q2", &["c", "z"]),
            ("q3", &["w", "d"]),
        ]);
        let sets = set_accuracy(&rs, &qs, &[1, 2]).unwrap();
        assert_eq!(sets.set_acc, vec![0.5, 1.0]);
        assert_eq!(sets.images_evaluated, 2);
        assert_eq!(sets.images_skipped, 0);
    }

    #[test]
    fn single_instance_image_reduces_to_instance_hit() {
        let qs = queries(&[("q0", "img0", "chair", "gt")]);
        let rs = results(&[("q0", &["gt", "x"])]);
        let sets = set_accuracy(&rs, &qs, &[1]).unwrap();
        let inst = instance_accuracy(&rs, &qs, &[1]).unwrap();
        assert_eq!(sets.set_acc[0], inst.per_category["chair"][0]);
    }

    #[test]
    fn empty_group_is_skipped_and_counted() {
        let qs = queries(&[("q0", "img0", "chair", "a")]);
        let rs = results(&[("q0", &["a"])]);
        let groups = vec![
            ("img0".to_string(), vec!["q0".to_string()]),
            ("ghost".to_string(), vec![]),
        ];
        let sets = set_accuracy_grouped(&rs, &groups, &qs, &[1]).unwrap();
        assert_eq!(sets.images_evaluated, 1);
        assert_eq!(sets.images_skipped, 1);
        assert_eq!(sets.set_acc, vec![1.0]);
    }

    #[test]
    fn k_zero_and_oversized_k_are_config_errors() {
        let qs = queries(&[("q0", "img0", "chair", "a")]);
        let rs = results(&[("q0", &["a", "b"])]);
        assert!(matches!(instance_accuracy(&rs, &qs, &[0]), Err(Error::Config(_))));
        assert!(matches!(instance_accuracy(&rs, &qs, &[3]), Err(Error::Config(_))));
        assert!(matches!(instance_accuracy(&rs, &qs, &[]), Err(Error::Config(_))));
        assert!(matches!(set_accuracy(&rs, &qs, &[3]), Err(Error::Config(_))));
    }

    #[test]
    fn result_row_without_query_is_a_validation_error() {
        let qs = queries(&[("q0", "img0", "chair", "a")]);
        let rs = results(&[("q0", &["a"]), ("mystery", &["b"])]);
        assert!(matches!(instance_accuracy(&rs, &qs, &[1]), Err(Error::Validation(_))));
    }

    #[test]
    fn query_missing_from_results_is_a_validation_error() {
        let qs = queries(&[
            ("q0", "img0", "chair", "a"),
            ("q1", "img0", "table", "b"),
        ]);
        let rs = results(&[("q0", &["a"])]);
        assert!(matches!(set_accuracy(&rs, &qs, &[1]), Err(Error::Validation(_))));
    }

    #[test]
    fn accuracies_are_monotone_in_k() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let cats = ["chair", "table", "sofa"];
        let mut qrows = Vec::new();
        let mut rrows: Vec<(String, Vec<String>)> = Vec::new();
        for i in 0..60 {
            let iid = format!("q{i:02}");
            let img = format!("img{:02}", i / 3);
            let cat = cats[rng.gen_range(0..3)];
            let gt = format!("id{:02}", rng.gen_range(0..30));
            // Place gt at a random rank (or not at all).
            let gt_rank = rng.gen_range(0..12);
            let cands: Vec<String> = (0..8)
                .map(|j| {
                    if j == gt_rank {
                        gt.clone()
                    } else {
                        format!("other{i:02}_{j}")
                    }
                })
                .collect();
            qrows.push((iid.clone(), img, cat.to_string(), gt));
            rrows.push((iid, cands));
        }
        let qs = QuerySet::new(
            qrows
                .iter()
                .map(|(iid, img, cat, gt)| InstanceQuery {
                    instance_id: iid.clone(),
                    image_id: img.clone(),
                    category: cat.clone(),
                    gt: gt.clone(),
                })
                .collect(),
        )
        .unwrap();
        let borrowed: Vec<(&str, Vec<&str>)> = rrows
            .iter()
            .map(|(id, c)| (id.as_str(), c.iter().map(String::as_str).collect()))
            .collect();
        let slices: Vec<(&str, &[&str])> =
            borrowed.iter().map(|(id, c)| (*id, c.as_slice())).collect();
        let rs = results(&slices);
        let ks = [1, 2, 3, 5, 8];
        let report = evaluate(&rs, &qs, &ks).unwrap();
        for accs in report.per_category.values() {
            for w in accs.windows(2) {
                assert!(w[1] >= w[0]);
            }
        }
        for w in report.macc.windows(2) {
            assert!(w[1] >= w[0]);
        }
        for w in report.set_acc.windows(2) {
            assert!(w[1] >= w[0]);
        }
        // Set accuracy never beats overall instance accuracy at the same k.
        for (slot, &k) in ks.iter().enumerate() {
            let overall = {
                let mut hits = 0usize;
                for row in 0..RankedResults::len(&rs) {
                    let q = qs.get(RankedResults::instance_id(&rs, row)).unwrap();
                    if rs.candidates(row).iter().take(k).any(|c| *c == q.gt) {
                        hits += 1;
                    }
                }
                hits as f64 / RankedResults::len(&rs) as f64
            };
            assert!(report.set_acc[slot] <= overall + 1e-12);
        }
    }

    #[test]
    fn metrics_match_naive_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
        let cats = ["chair", "table"];
        let mut qrows = Vec::new();
        let mut rrows: Vec<(String, Vec<String>)> = Vec::new();
        for i in 0..40 {
            let iid = format!("q{i:02}");
            let img = format!("img{:02}", i / 2);
            let cat = cats[rng.gen_range(0..2)];
            let gt = format!("id{:02}", rng.gen_range(0..20));
            let gt_rank = rng.gen_range(0..6);
            let cands: Vec<String> = (0..4)
                .map(|j| if j == gt_rank { gt.clone() } else { format!("o{i:02}_{j}") })
                .collect();
            qrows.push(InstanceQuery {
                instance_id: iid.clone(),
                image_id: img,
                category: cat.to_string(),
                gt,
            });
            rrows.push((iid, cands));
        }
        let qs = QuerySet::new(qrows.clone()).unwrap();
        let borrowed: Vec<(&str, Vec<&str>)> = rrows
            .iter()
            .map(|(id, c)| (id.as_str(), c.iter().map(String::as_str).collect()))
            .collect();
        let slices: Vec<(&str, &[&str])> =
            borrowed.iter().map(|(id, c)| (*id, c.as_slice())).collect();
        let rs = results(&slices);
        let ks = [1, 2, 4];
        let report = evaluate(&rs, &qs, &ks).unwrap();

        // Naive recomputation straight from the fixture rows.
        for (slot, &k) in ks.iter().enumerate() {
            let mut cat_hits: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for q in &qrows {
                let cands = &rrows.iter().find(|(id, _)| *id == q.instance_id).unwrap().1;
                let hit = cands.iter().take(k).any(|c| *c == q.gt);
                let e = cat_hits.entry(q.category.as_str()).or_insert((0, 0));
                e.1 += 1;
                if hit {
                    e.0 += 1;
                }
            }
            let mut macc = 0.0;
            for (cat, (h, t)) in &cat_hits {
                let acc = *h as f64 / *t as f64;
                assert_eq!(report.per_category[*cat][slot], acc);
                macc += acc;
            }
            macc /= cat_hits.len() as f64;
            assert!((report.macc[slot] - macc).abs() < 1e-15);

            let mut images: BTreeMap<&str, bool> = BTreeMap::new();
            for q in &qrows {
                let cands = &rrows.iter().find(|(id, _)| *id == q.instance_id).unwrap().1;
                let hit = cands.iter().take(k).any(|c| *c == q.gt);
                let e = images.entry(q.image_id.as_str()).or_insert(true);
                *e = *e && hit;
            }
            let set_acc =
                images.values().filter(|&&v| v).count() as f64 / images.len() as f64;
            assert!((report.set_acc[slot] - set_acc).abs() < 1e-15);
        }
    }

    #[test]
    fn report_round_trips_and_serializes_deterministically() {
        let qs = queries(&[
            ("q0", "img0", "chair", "a"),
            ("q1", "img0", "table", "b"),
        ]);
        let rs = results(&[("q0", &["a", "x"]), ("q1", &["y", "b"])]);
        let report = evaluate(&rs, &qs, &[1, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("r1.json");
        let p2 = dir.path().join("r2.json");
        write_report(&p1, &report).unwrap();
        write_report(&p2, &report).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(load_report(&p1).unwrap(), report);
        let table = format_table(&report);
        assert!(table.contains("chair"));
        assert!(table.contains("ACC@1"));
        assert!(table.contains("MACC"));
        assert!(table.contains("SET"));
    }

    #[test]
    fn empty_results_yield_a_valid_empty_report() {
        let report = EvalReport {
            ks: vec![1, 5],
            per_category: BTreeMap::new(),
            category_counts: BTreeMap::new(),
            macc: vec![0.0, 0.0],
            set_acc: vec![0.0, 0.0],
            instances: 0,
            images_evaluated: 0,
            images_skipped: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        write_report(&path, &report).unwrap();
        assert_eq!(load_report(&path).unwrap(), report);
    }

    #[test]
    fn reranked_matrices_evaluate_through_the_same_trait() {
        let reranked = RerankedMatrix::new(
            vec!["q0".into()],
            vec![vec!["gt".into(), "x".into()]],
            vec![vec![0.0, 0.5]],
            vec![vec![0, 1]],
        )
        .unwrap();
        let qs = queries(&[("q0", "img0", "chair", "gt")]);
        let report = evaluate(&reranked, &qs, &[1]).unwrap();
        assert_eq!(report.macc, vec![1.0]);
        assert_eq!(report.set_acc, vec![1.0]);
    }
}
