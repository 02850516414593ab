//! Iterative context-aware re-ranking of per-image retrieval results.
//!
//! Instances cropped from the same scene were chosen to go together, so a
//! candidate that sits close to the other picks in context space deserves a
//! boost. Re-ranking runs column by column: each round seeds itself with
//! the globally most confident remaining candidate (the anchor), then walks
//! the other instances in confidence order, scoring every remaining
//! candidate by a blend of its scaled feature distance and its closest
//! context distance to the candidates already chosen this round. Chosen
//! cells leave the pool, and the next round fills the next column.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::ContextModel;
use crate::error::{Error, Result};
use crate::index::RetrievalMatrix;
use crate::ingest::QuerySet;

/// Re-ranking controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerankConfig {
    /// Weight of the feature-distance term; `1 - alpha` weights context.
    pub alpha: f64,
    /// Output columns per instance.
    pub k_out: usize,
    /// Context distance charged when a candidate pair has no usable
    /// context vectors.
    pub missing_context_penalty: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig { alpha: 0.5, k_out: 10, missing_context_penalty: 1.0 }
    }
}

impl RerankConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.k_out == 0 {
            return Err(Error::Config("k_out must be at least 1".into()));
        }
        if !self.missing_context_penalty.is_finite() || self.missing_context_penalty < 0.0 {
            return Err(Error::Config(format!(
                "missing_context_penalty must be finite and non-negative, got {}",
                self.missing_context_penalty
            )));
        }
        Ok(())
    }
}

/// Per-image re-ranked candidates with provenance.
///
/// Row order matches the input matrix. `scores[row][col]` is the blended
/// objective the cell was chosen under (an anchor records its scaled
/// feature distance), and `source_columns[row][col]` points back at the
/// input column the candidate came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankedMatrix {
    instance_ids: Vec<String>,
    candidates: Vec<Vec<String>>,
    scores: Vec<Vec<f64>>,
    source_columns: Vec<Vec<usize>>,
    k: usize,
}

impl RerankedMatrix {
    pub fn new(
        instance_ids: Vec<String>,
        candidates: Vec<Vec<String>>,
        scores: Vec<Vec<f64>>,
        source_columns: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if instance_ids.is_empty() {
            return Err(Error::Contract("reranked matrix needs at least one row".into()));
        }
        if candidates.len() != instance_ids.len()
            || scores.len() != instance_ids.len()
            || source_columns.len() != instance_ids.len()
        {
            return Err(Error::Shape("row payloads do not align with instance ids".into()));
        }
        let k = candidates[0].len();
        if k == 0 {
            return Err(Error::Shape("reranked rows cannot be empty".into()));
        }
        for row in 0..instance_ids.len() {
            if candidates[row].len() != k
                || scores[row].len() != k
                || source_columns[row].len() != k
            {
                return Err(Error::Shape(format!(
                    "row {row} width differs from first row width {k}"
                )));
            }
            if scores[row].iter().any(|s| !s.is_finite()) {
                return Err(Error::Data(format!("row {row} has a non-finite score")));
            }
        }
        Ok(RerankedMatrix { instance_ids, candidates, scores, source_columns, k })
    }

    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }

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

    pub fn scores(&self, row: usize) -> &[f64] {
        &self.scores[row]
    }

    pub fn source_columns(&self, row: usize) -> &[usize] {
        &self.source_columns[row]
    }

    pub fn row_of(&self, instance_id: &str) -> Option<usize> {
        self.instance_ids.iter().position(|id| id == instance_id)
    }
}

/// Min-max scales one distance row to `[0, 1]`; a constant row scales to
/// all zeros.
fn scale_row(distances: &[f32]) -> Vec<f64> {
    let min = distances.iter().cloned().fold(f64::INFINITY, |a, b| a.min(b as f64));
    let max = distances.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
    let span = max - min;
    if span <= 0.0 {
        return vec![0.0; distances.len()];
    }
    distances.iter().map(|&d| (d as f64 - min) / span).collect()
}

/// Blended objective of one candidate cell:
/// `alpha * df_scaled + (1 - alpha) * ctx`, where `ctx` is the smallest
/// context distance from the candidate to any already-chosen candidate.
/// Pairs without usable context vectors fall back to the penalty.
pub fn incremental_distance(
    df_scaled: f64,
    candidate: &str,
    chosen: &[&str],
    context: &ContextModel,
    alpha: f64,
    penalty: f64,
) -> Result<f64> {
    if chosen.is_empty() {
        return Err(Error::Contract("incremental distance needs a chosen set".into()));
    }
    let ctx = match context.vector(candidate) {
        Err(_) => penalty,
        Ok(cand_vec) => {
            let mut best: Option<f64> = None;
            for &other in chosen {
                if let Ok(other_vec) = context.vector(other) {
                    let d = crate::context::context_distance(cand_vec, other_vec);
                    best = Some(best.map_or(d, |b: f64| b.min(d)));
                }
            }
            best.unwrap_or(penalty)
        }
    };
    Ok(alpha * df_scaled + (1.0 - alpha) * ctx)
}

/// Re-ranks one image's retrieval rows. See the module docs for the round
/// structure; the deterministic tie rules are content-addressed (never row
/// position, so permuting input rows permutes output rows identically):
///
/// - anchor: smallest scaled distance, then candidate id, then instance id;
/// - instance visit order: smallest best remaining scaled distance, then
///   instance id;
/// - candidate choice: smallest blended score, then smaller scaled
///   distance, then candidate id.
pub fn rerank_image(
    retrieval: &RetrievalMatrix,
    context: &ContextModel,
    config: &RerankConfig,
) -> Result<RerankedMatrix> {
    config.validate()?;
    if retrieval.is_empty() {
        return Err(Error::EmptyPool("no instances to rerank".into()));
    }
    let n = retrieval.len();
    for row in 0..n {
        let width = retrieval.candidates(row).len();
        if width < config.k_out {
            return Err(Error::PoolExhausted {
                instance: retrieval.instance_id(row).to_string(),
                column: width,
            });
        }
    }

    let scaled: Vec<Vec<f64>> = (0..n).map(|row| scale_row(retrieval.distances(row))).collect();
    // Remaining input columns per row; distances ascend, so the head of
    // each list is that row's best remaining cell.
    let mut remaining: Vec<Vec<usize>> =
        (0..n).map(|row| (0..retrieval.candidates(row).len()).collect()).collect();

    let mut out_candidates: Vec<Vec<String>> = vec![Vec::with_capacity(config.k_out); n];
    let mut out_scores: Vec<Vec<f64>> = vec![Vec::with_capacity(config.k_out); n];
    let mut out_sources: Vec<Vec<usize>> = vec![Vec::with_capacity(config.k_out); n];

    for _ in 0..config.k_out {
        // Anchor: globally smallest scaled distance. Within a row the tied
        // candidates form a prefix of the remaining list, so scan cells
        // until the row's value rises above its head value.
        let mut anchor: Option<(f64, &str, &str, usize, usize)> = None;
        for row in 0..n {
            let head = scaled[row][remaining[row][0]];
            let instance = retrieval.instance_id(row);
            for &col in &remaining[row] {
                let value = scaled[row][col];
                if value > head {
                    break;
                }
                let id = retrieval.candidates(row)[col].as_str();
                let better = match anchor {
                    None => true,
                    Some((bv, bid, binst, _, _)) => {
                        value < bv
                            || (value == bv
                                && (id < bid || (id == bid && instance < binst)))
                    }
                };
                if better {
                    anchor = Some((value, id, instance, row, col));
                }
            }
        }
        let (anchor_value, _, _, anchor_row, anchor_col) = anchor.expect("n >= 1 rows");
        let anchor_id = retrieval.candidates(anchor_row)[anchor_col].clone();
        out_candidates[anchor_row].push(anchor_id.clone());
        out_scores[anchor_row].push(anchor_value);
        out_sources[anchor_row].push(anchor_col);
        remaining[anchor_row].retain(|&c| c != anchor_col);
        let mut chosen: Vec<&str> = vec![anchor_id.as_str()];

        // Visit the other instances by confidence.
        let mut order: Vec<usize> = (0..n).filter(|&r| r != anchor_row).collect();
        order.sort_by(|&a, &b| {
            let va = scaled[a][remaining[a][0]];
            let vb = scaled[b][remaining[b][0]];
            va.total_cmp(&vb)
                .then_with(|| retrieval.instance_id(a).cmp(retrieval.instance_id(b)))
        });

        let mut picked: Vec<(usize, usize, f64)> = Vec::with_capacity(order.len());
        for &row in &order {
            let mut best: Option<(f64, f64, &str, usize)> = None;
            for &col in &remaining[row] {
                let df = scaled[row][col];
                let id = retrieval.candidates(row)[col].as_str();
                let score = incremental_distance(
                    df,
                    id,
                    &chosen,
                    context,
                    config.alpha,
                    config.missing_context_penalty,
                )?;
                let better = match best {
                    None => true,
                    Some((bs, bdf, bid, _)) => {
                        score < bs
                            || (score == bs && (df < bdf || (df == bdf && id < bid)))
                    }
                };
                if better {
                    best = Some((score, df, id, col));
                }
            }
            let (score, _, id, col) = best.expect("row has remaining candidates");
            picked.push((row, col, score));
            chosen.push(id);
        }
        drop(chosen);

        for (row, col, score) in picked {
            out_candidates[row].push(retrieval.candidates(row)[col].clone());
            out_scores[row].push(score);
            out_sources[row].push(col);
            remaining[row].retain(|&c| c != col);
        }
    }

    RerankedMatrix::new(
        retrieval.instance_ids().to_vec(),
        out_candidates,
        out_scores,
        out_sources,
    )
}

/// Re-ranks every image group of `matrix` and stitches the rows back
/// together in the original row order.
///
/// Queries define the grouping: instances of one image are re-ranked
/// together and never see another image's pool. Images are independent,
/// so they run in parallel; the stitched output does not depend on the
/// worker count. Every matrix row must belong to a query and vice versa,
/// otherwise rows would silently drop out of the result.
pub fn rerank_grouped(
    matrix: &RetrievalMatrix,
    queries: &QuerySet,
    context: &ContextModel,
    config: &RerankConfig,
) -> Result<RerankedMatrix> {
    if queries.len() != matrix.len() {
        return Err(Error::Validation(format!(
            "{} queries for {} retrieval rows",
            queries.len(),
            matrix.len()
        )));
    }
    let groups = queries.by_image();
    let tasks: Vec<Vec<usize>> = groups
        .iter()
        .map(|(_, rows)| {
            rows.iter()
                .map(|&q| {
                    let id = &queries.queries()[q].instance_id;
                    matrix.row_of(id).ok_or_else(|| Error::Validation(format!(
                        "query instance {id:?} has no retrieval row"
                    )))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let reranked: Vec<RerankedMatrix> = tasks
        .par_iter()
        .map(|rows| rerank_image(&matrix.select_rows(rows)?, context, config))
        .collect::<Result<_>>()?;

    let mut ids = vec![None; matrix.len()];
    let mut cands = vec![Vec::new(); matrix.len()];
    let mut scores = vec![Vec::new(); matrix.len()];
    let mut sources = vec![Vec::new(); matrix.len()];
    for (rows, sub) in tasks.iter().zip(&reranked) {
        for (out_row, &original) in rows.iter().enumerate() {
            ids[original] = Some(sub.instance_id(out_row).to_string());
            cands[original] = sub.candidates(out_row).to_vec();
            scores[original] = sub.scores(out_row).to_vec();
            sources[original] = sub.source_columns(out_row).to_vec();
        }
    }
    RerankedMatrix::new(
        ids.into_iter()
            .map(|id| id.ok_or_else(|| Error::Validation("retrieval row not covered by any query".into())))
            .collect::<Result<_>>()?,
        cands,
        scores,
        sources,
    )
}

#[derive(Serialize, Deserialize)]
struct RerankRecord {
    instance: String,
    candidates: Vec<String>,
    scores: Vec<f64>,
    source_columns: Vec<usize>,
}

/// Writes a reranked matrix as JSONL, one instance per line.
pub fn save_reranked<P: AsRef<Path>>(path: P, matrix: &RerankedMatrix) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    for row in 0..matrix.len() {
        let record = RerankRecord {
            instance: matrix.instance_id(row).to_string(),
            candidates: matrix.candidates(row).to_vec(),
            scores: matrix.scores(row).to_vec(),
            source_columns: matrix.source_columns(row).to_vec(),
        };
        serde_json::to_writer(&mut writer, &record).map_err(|e| Error::Format(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a matrix written by [`save_reranked`].
pub fn load_reranked<P: AsRef<Path>>(path: P) -> Result<RerankedMatrix> {
    let reader = BufReader::new(File::open(path)?);
    let mut instance_ids = Vec::new();
    let mut candidates = Vec::new();
    let mut scores = Vec::new();
    let mut source_columns = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RerankRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if let Some(prev) = seen.insert(record.instance.clone(), lineno + 1) {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("instance {:?} already appeared on line {prev}", record.instance),
            });
        }
        instance_ids.push(record.instance);
        candidates.push(record.candidates);
        scores.push(record.scores);
        source_columns.push(record.source_columns);
    }
    RerankedMatrix::new(instance_ids, candidates, scores, source_columns)
}
