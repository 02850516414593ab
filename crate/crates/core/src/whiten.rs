//! ZCA whitening of feature matrices.
//!
//! Retrieval distance is plain Euclidean, so correlated feature channels get
//! decorrelated first: fit a whitening transform on the catalog identity
//! embeddings, then apply it to identities and instances alike, followed by
//! l2 normalization. The transform is `U (L + eps I)^{-1/2} U^T` for the
//! eigendecomposition `U L U^T` of the empirical covariance.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{read_embeddings, write_embeddings, EmbeddingMatrix};

/// A fitted whitening transform.
///
/// Parameters are quantized to f32 at fit time so that a model loaded from
/// disk is bit-identical to the freshly fitted one and downstream artifacts
/// do not depend on whether a stage was re-run from persisted inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ZcaModel {
    mean: Vec<f32>,
    transform: Vec<f32>,
    epsilon: f64,
    dim: usize,
}

impl ZcaModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    /// Row-major `dim x dim` transform matrix.
    pub fn transform(&self) -> &[f32] {
        &self.transform
    }

    /// Applies the transform to one centered row at f64 precision.
    pub fn transform_row_f64(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim {
            return Err(Error::Shape(format!(
                "model dim {} does not match row length {}",
                self.dim,
                row.len()
            )));
        }
        let d = self.dim;
        let mut out = vec![0.0f64; d];
        for i in 0..d {
            let w = &self.transform[i * d..(i + 1) * d];
            let mut acc = 0.0f64;
            for j in 0..d {
                acc += w[j] as f64 * (row[j] - self.mean[j] as f64);
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Applies the transform to one row, producing f32 output.
    pub fn transform_row(&self, row: &[f32]) -> Result<Vec<f32>> {
        let promoted: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        Ok(self.transform_row_f64(&promoted)?.into_iter().map(|v| v as f32).collect())
    }
}

/// Fits a ZCA whitening model on the rows of `x`.
///
/// The empirical covariance uses the n-1 denominator. Eigenvalues are
/// clamped at zero before the `eps` shift; with `eps == 0` any exactly
/// degenerate direction is projected out instead of dividing by zero.
pub fn fit_zca(x: &EmbeddingMatrix, epsilon: f64) -> Result<ZcaModel> {
    if x.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: x.len() });
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let n = x.len();
    let d = x.dim();

    let mut mean = vec![0.0f64; d];
    for row in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(row)) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for row in 0..n {
        for (c, (&v, m)) in centered.iter_mut().zip(x.row(row).iter().zip(&mean)) {
            *c = v as f64 - *m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let eigen = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
    let scales: Vec<f64> = eigen
        .eigenvalues
        .iter()
        .map(|&l| {
            let shifted = l.max(0.0) + epsilon;
            if shifted > 0.0 {
                1.0 / shifted.sqrt()
            } else {
                0.0
            }
        })
        .collect();

    // W = U diag(scale) U^T, symmetrized to wash out round-off.
    let u = &eigen.eigenvectors;
    let mut transform = vec![0.0f32; d * d];
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0f64;
            for (k, &s) in scales.iter().enumerate() {
                acc += u[(i, k)] * s * u[(j, k)];
            }
            transform[i * d + j] = acc as f32;
            transform[j * d + i] = acc as f32;
        }
    }

    Ok(ZcaModel {
        mean: mean.into_iter().map(|v| v as f32).collect(),
        transform,
        epsilon,
        dim: d,
    })
}

/// Whitens every row of `x`, preserving ids and row order.
pub fn apply_zca(model: &ZcaModel, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if x.dim() != model.dim {
        return Err(Error::Shape(format!(
            "model dim {} does not match matrix dim {}",
            model.dim,
            x.dim()
        )));
    }
    let mut data = Vec::with_capacity(x.len() * x.dim());
    for row in 0..x.len() {
        data.extend(model.transform_row(x.row(row))?);
    }
    EmbeddingMatrix::new(x.ids().to_vec(), x.dim(), data)
}

/// l2-normalizes every row. Zero rows pass through unchanged; the second
/// return value counts them.
pub fn l2_normalize(x: &EmbeddingMatrix) -> (EmbeddingMatrix, usize) {
    let mut data = Vec::with_capacity(x.len() * x.dim());
    let mut zero_rows = 0usize;
    for row in 0..x.len() {
        let r = x.row(row);
        let norm = r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_rows += 1;
            data.extend_from_slice(r);
        } else {
            data.extend(r.iter().map(|&v| (v as f64 / norm) as f32));
        }
    }
    let matrix = EmbeddingMatrix::new(x.ids().to_vec(), x.dim(), data)
        .expect("normalization preserves shape and finiteness");
    (matrix, zero_rows)
}

/// Whitens then l2-normalizes, the canonical preprocessing order for
/// retrieval features. Returns the processed matrix and the zero-row count.
pub fn whiten_and_normalize(model: &ZcaModel, x: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, usize)> {
    Ok(l2_normalize(&apply_zca(model, x)?))
}

#[derive(Serialize, Deserialize)]
struct ZcaHeader {
    epsilon: f64,
    dim: usize,
}

/// Persists the model: the mean (row 0) and transform (rows 1..=dim) in the
/// binary embedding format, plus a one-line JSON header carrying epsilon and
/// dim at `<path>.meta`.
pub fn save_zca<P: AsRef<Path>>(path: P, model: &ZcaModel) -> Result<()> {
    let d = model.dim;
    let mut ids = Vec::with_capacity(d + 1);
    let mut data = Vec::with_capacity((d + 1) * d);
    ids.push("__mean".to_string());
    data.extend_from_slice(&model.mean);
    for i in 0..d {
        ids.push(format!("__w_{i}"));
        data.extend_from_slice(&model.transform[i * d..(i + 1) * d]);
    }
    let matrix = EmbeddingMatrix::new(ids, d, data)?;
    write_embeddings(&path, &matrix)?;
    let meta_path = meta_path(path.as_ref());
    let mut writer = BufWriter::new(File::create(meta_path)?);
    serde_json::to_writer(&mut writer, &ZcaHeader { epsilon: model.epsilon, dim: d })
        .map_err(|e| Error::Format(e.to_string()))?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

/// Loads a model previously written by [`save_zca`]; bit-exact round trip.
pub fn load_zca<P: AsRef<Path>>(path: P) -> Result<ZcaModel> {
    let matrix = read_embeddings(&path)?;
    let meta_file = File::open(meta_path(path.as_ref()))?;
    let mut line = String::new();
    BufReader::new(meta_file).read_line(&mut line)?;
    let header: ZcaHeader =
        serde_json::from_str(line.trim()).map_err(|e| Error::Format(e.to_string()))?;
    let d = header.dim;
    if matrix.dim() != d || matrix.len() != d + 1 {
        return Err(Error::Format(format!(
            "whitening matrix shape {}x{} does not match header dim {d}",
            matrix.len(),
            matrix.dim()
        )));
    }
    let mean = matrix.row(0).to_vec();
    let mut transform = Vec::with_capacity(d * d);
    for i in 0..d {
        transform.extend_from_slice(matrix.row(i + 1));
    }
    Ok(ZcaModel { mean, transform, epsilon: header.epsilon, dim: d })
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta");
    os.into()
}
