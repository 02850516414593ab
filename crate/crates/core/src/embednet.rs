//! Pairwise verification embedding model.
//!
//! A small Siamese setup: one learnable linear projection maps base vectors
//! into the retrieval space, a two-node verification head classifies fused
//! (instance, identity) pairs as match / non-match, and a classifier head
//! predicts the instance's pseudo-attribute. The joint loss is
//! `ratio * mean(verification CE) + mean(attribute CE)`, optimized by plain
//! mini-batch SGD with per-epoch hard-negative mining. All training math is
//! f64 with hand-derived gradients; `gradient_check` validates them against
//! central finite differences.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeAssignment;
use crate::error::{Error, Result};
use crate::ingest::{write_embeddings, EmbeddingMatrix};

/// How the two pair embeddings are merged before the verification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `max(0, e1 - e2)` elementwise.
    SubtractRelu,
    /// `(e1 - e2)^2` elementwise.
    SquaredDiff,
}

/// Fuses two embeddings of equal length.
pub fn fuse(fusion: Fusion, e1: &[f64], e2: &[f64]) -> Result<Vec<f64>> {
    if e1.len() != e2.len() {
        return Err(Error::Shape(format!(
            "fusion inputs differ in length: {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    Ok(match fusion {
        Fusion::SubtractRelu => e1.iter().zip(e2).map(|(&a, &b)| (a - b).max(0.0)).collect(),
        Fusion::SquaredDiff => e1.iter().zip(e2).map(|(&a, &b)| (a - b) * (a - b)).collect(),
    })
}

fn init_uniform<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Shared linear projection `y = W x + b` applied to both pair sides.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    w: Vec<f64>,
    b: Vec<f64>,
    input_dim: usize,
    embed_dim: usize,
}

impl ProjectionModel {
    /// Fresh model with uniform `[-1/sqrt(d), 1/sqrt(d)]` parameters.
    pub fn new<R: Rng>(input_dim: usize, embed_dim: usize, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || embed_dim == 0 {
            return Err(Error::Shape("projection dims must be positive".into()));
        }
        Ok(ProjectionModel {
            w: init_uniform(rng, embed_dim * input_dim, input_dim),
            b: init_uniform(rng, embed_dim, input_dim),
            input_dim,
            embed_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn project_f64(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "input length {} does not match projection input dim {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut out = self.b.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w[i * self.input_dim..(i + 1) * self.input_dim];
            let mut acc = 0.0;
            for (&wv, &xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            *o += acc;
        }
        Ok(out)
    }

    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>> {
        let promoted: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.project_f64(&promoted)
    }

    /// Projects every row, quantizing the output to f32 for serving.
    pub fn project_matrix(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(x.len() * self.embed_dim);
        for row in 0..x.len() {
            data.extend(self.project(x.row(row))?.into_iter().map(|v| v as f32));
        }
        EmbeddingMatrix::new(x.ids().to_vec(), self.embed_dim, data)
    }

    /// Rounds every parameter through f32: the serving-precision twin of
    /// this model, identical to what a checkpoint round-trip produces.
    pub fn quantized(&self) -> Self {
        ProjectionModel {
            w: self.w.iter().map(|&v| v as f32 as f64).collect(),
            b: self.b.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

/// Two-node softmax head over fused pair embeddings; index 1 means "match".
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationHead {
    fusion: Fusion,
    v: Vec<f64>,
    c: Vec<f64>,
    embed_dim: usize,
}

impl VerificationHead {
    pub fn new<R: Rng>(embed_dim: usize, fusion: Fusion, rng: &mut R) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Shape("verification head dim must be positive".into()));
        }
        Ok(VerificationHead {
            fusion,
            v: init_uniform(rng, 2 * embed_dim, embed_dim),
            c: init_uniform(rng, 2, embed_dim),
            embed_dim,
        })
    }

    pub fn fusion(&self) -> Fusion {
        self.fusion
    }

    fn logits(&self, fused: &[f64]) -> [f64; 2] {
        let mut z = [self.c[0], self.c[1]];
        for r in 0..2 {
            let row = &self.v[r * self.embed_dim..(r + 1) * self.embed_dim];
            let mut acc = 0.0;
            for (&vv, &fv) in row.iter().zip(fused) {
                acc += vv * fv;
            }
            z[r] += acc;
        }
        z
    }

    pub fn quantized(&self) -> Self {
        VerificationHead {
            v: self.v.iter().map(|&x| x as f32 as f64).collect(),
            c: self.c.iter().map(|&x| x as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

/// Attribute classifier over instance embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    u: Vec<f64>,
    g: Vec<f64>,
    classes: usize,
    embed_dim: usize,
}

impl ClassifierHead {
    pub fn new<R: Rng>(embed_dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if embed_dim == 0 || classes == 0 {
            return Err(Error::Shape("classifier dims must be positive".into()));
        }
        Ok(ClassifierHead {
            u: init_uniform(rng, classes * embed_dim, embed_dim),
            g: init_uniform(rng, classes, embed_dim),
            classes,
            embed_dim,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, embed: &[f64]) -> Vec<f64> {
        let mut z = self.g.clone();
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &self.u[r * self.embed_dim..(r + 1) * self.embed_dim];
            let mut acc = 0.0;
            for (&uv, &ev) in row.iter().zip(embed) {
                acc += uv * ev;
            }
            *zr += acc;
        }
        z
    }

    pub fn quantized(&self) -> Self {
        ClassifierHead {
            u: self.u.iter().map(|&x| x as f32 as f64).collect(),
            g: self.g.iter().map(|&x| x as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

/// One training pair: an instance vector against an identity vector, with
/// the match label and the instance's attribute class.
#[derive(Debug, Clone)]
pub struct PairExample {
    pub instance: Vec<f64>,
    pub identity: Vec<f64>,
    pub matched: bool,
    pub attribute: usize,
}

/// Parameter gradients in model layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
    pub c: Vec<f64>,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
}

impl Gradients {
    fn zeros(proj: &ProjectionModel, vhead: &VerificationHead, chead: &ClassifierHead) -> Self {
        Gradients {
            w: vec![0.0; proj.w.len()],
            b: vec![0.0; proj.b.len()],
            v: vec![0.0; vhead.v.len()],
            c: vec![0.0; vhead.c.len()],
            u: vec![0.0; chead.u.len()],
            g: vec![0.0; chead.g.len()],
        }
    }

    fn scale(&mut self, factor: f64) {
        for buf in [&mut self.w, &mut self.b, &mut self.v, &mut self.c, &mut self.u, &mut self.g]
        {
            for x in buf.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// Both loss terms of a forward pass, before mixing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Mean verification cross-entropy over the batch.
    pub verification: f64,
    /// Mean attribute cross-entropy over the batch.
    pub classification: f64,
}

impl LossTerms {
    pub fn total(&self, loss_ratio: f64) -> f64 {
        loss_ratio * self.verification + self.classification
    }
}

fn softmax_ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + m - logits[target];
    let mut dz: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    dz[target] -= 1.0;
    (loss, dz)
}

/// Computes both loss terms and their gradients separately; the caller mixes
/// them with the loss ratio. Shared plumbing for [`forward_and_loss`] and
/// the loss-mix tests.
pub fn forward_term_gradients(
    proj: &ProjectionModel,
    vhead: &VerificationHead,
    chead: &ClassifierHead,
    batch: &[PairExample],
) -> Result<(LossTerms, Gradients, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let d = proj.input_dim;
    let e = proj.embed_dim;
    let mut gv = Gradients::zeros(proj, vhead, chead);
    let mut gc = Gradients::zeros(proj, vhead, chead);
    let mut verification = 0.0f64;
    let mut classification = 0.0f64;

    for example in batch {
        if example.attribute >= chead.classes {
            return Err(Error::Label(format!(
                "attribute {} out of range for {} classes",
                example.attribute, chead.classes
            )));
        }
        let e1 = proj.project_f64(&example.instance)?;
        let e2 = proj.project_f64(&example.identity)?;

        // Verification term.
        let fused = fuse(vhead.fusion, &e1, &e2)?;
        let z = vhead.logits(&fused);
        let target = usize::from(example.matched);
        let (loss_v, dz) = softmax_ce(&z, target);
        verification += loss_v;
        let mut dfused = vec![0.0f64; e];
        for r in 0..2 {
            gv.c[r] += dz[r];
            let row = &vhead.v[r * e..(r + 1) * e];
            for q in 0..e {
                gv.v[r * e + q] += dz[r] * fused[q];
                dfused[q] += row[q] * dz[r];
            }
        }
        let mut de1 = vec![0.0f64; e];
        let mut de2 = vec![0.0f64; e];
        match vhead.fusion {
            Fusion::SubtractRelu => {
                for q in 0..e {
                    if e1[q] - e2[q] > 0.0 {
                        de1[q] = dfused[q];
                        de2[q] = -dfused[q];
                    }
                }
            }
            Fusion::SquaredDiff => {
                for q in 0..e {
                    let ds = dfused[q] * 2.0 * (e1[q] - e2[q]);
                    de1[q] = ds;
                    de2[q] = -ds;
                }
            }
        }
        for q in 0..e {
            gv.b[q] += de1[q] + de2[q];
            let wrow = &mut gv.w[q * d..(q + 1) * d];
            for j in 0..d {
                wrow[j] += de1[q] * example.instance[j] + de2[q] * example.identity[j];
            }
        }

        // Classification term on the instance embedding.
        let zc = chead.logits(&e1);
        let (loss_c, dzc) = softmax_ce(&zc, example.attribute);
        classification += loss_c;
        let mut de1c = vec![0.0f64; e];
        for (r, &dzr) in dzc.iter().enumerate() {
            gc.g[r] += dzr;
            let row = &chead.u[r * e..(r + 1) * e];
            for q in 0..e {
                gc.u[r * e + q] += dzr * e1[q];
                de1c[q] += row[q] * dzr;
            }
        }
        for q in 0..e {
            gc.b[q] += de1c[q];
            let wrow = &mut gc.w[q * d..(q + 1) * d];
            for j in 0..d {
                wrow[j] += de1c[q] * example.instance[j];
            }
        }
    }

    let inv = 1.0 / batch.len() as f64;
    gv.scale(inv);
    gc.scale(inv);
    Ok((
        LossTerms { verification: verification * inv, classification: classification * inv },
        gv,
        gc,
    ))
}

/// Mean joint loss over a batch and the gradient of every parameter.
pub fn forward_and_loss(
    proj: &ProjectionModel,
    vhead: &VerificationHead,
    chead: &ClassifierHead,
    batch: &[PairExample],
    loss_ratio: f64,
) -> Result<(f64, LossTerms, Gradients)> {
    let (terms, gv, mut grads) = forward_term_gradients(proj, vhead, chead, batch)?;
    // grads = ratio * verification grads + classification grads.
    let gc = std::mem::replace(&mut grads, gv);
    grads.scale(loss_ratio);
    for (dst, src) in [
        (&mut grads.w, &gc.w),
        (&mut grads.b, &gc.b),
        (&mut grads.v, &gc.v),
        (&mut grads.c, &gc.c),
        (&mut grads.u, &gc.u),
        (&mut grads.g, &gc.g),
    ] {
        for (a, &x) in dst.iter_mut().zip(src) {
            *a += x;
        }
    }
    Ok((terms.total(loss_ratio), terms, grads))
}

/// Probability that the pair matches, under the verification head.
pub fn match_probability(
    proj: &ProjectionModel,
    vhead: &VerificationHead,
    instance: &[f32],
    identity: &[f32],
) -> Result<f64> {
    let e1 = proj.project(instance)?;
    let e2 = proj.project(identity)?;
    let fused = fuse(vhead.fusion, &e1, &e2)?;
    let z = vhead.logits(&fused);
    let m = z[0].max(z[1]);
    let p1 = (z[1] - m).exp();
    Ok(p1 / ((z[0] - m).exp() + p1))
}

fn flatten_params(
    proj: &ProjectionModel,
    vhead: &VerificationHead,
    chead: &ClassifierHead,
) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(&proj.w);
    out.extend_from_slice(&proj.b);
    out.extend_from_slice(&vhead.v);
    out.extend_from_slice(&vhead.c);
    out.extend_from_slice(&chead.u);
    out.extend_from_slice(&chead.g);
    out
}

fn unflatten_params(
    theta: &[f64],
    proj: &mut ProjectionModel,
    vhead: &mut VerificationHead,
    chead: &mut ClassifierHead,
) {
    let mut cursor = 0usize;
    for buf in [&mut proj.w, &mut proj.b, &mut vhead.v, &mut vhead.c, &mut chead.u, &mut chead.g]
    {
        let len = buf.len();
        buf.copy_from_slice(&theta[cursor..cursor + len]);
        cursor += len;
    }
}

/// Relative error between an analytic and a numeric gradient entry; exactly
/// invariant under a common scale factor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs() + numeric.abs();
    if denom < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Max relative error between analytic gradients and central finite
/// differences of the joint loss over every parameter.
pub fn gradient_check(
    proj: &ProjectionModel,
    vhead: &VerificationHead,
    chead: &ClassifierHead,
    batch: &[PairExample],
    loss_ratio: f64,
    epsilon: f64,
) -> Result<f64> {
    let (_, _, grads) = forward_and_loss(proj, vhead, chead, batch, loss_ratio)?;
    let analytic = {
        let mut out = Vec::new();
        out.extend_from_slice(&grads.w);
        out.extend_from_slice(&grads.b);
        out.extend_from_slice(&grads.v);
        out.extend_from_slice(&grads.c);
        out.extend_from_slice(&grads.u);
        out.extend_from_slice(&grads.g);
        out
    };
    let mut proj = proj.clone();
    let mut vhead = vhead.clone();
    let mut chead = chead.clone();
    let mut theta = flatten_params(&proj, &vhead, &chead);
    let mut max_err = 0.0f64;
    for i in 0..theta.len() {
        let original = theta[i];
        theta[i] = original + epsilon;
        unflatten_params(&theta, &mut proj, &mut vhead, &mut chead);
        let (plus, _, _) = forward_and_loss(&proj, &vhead, &chead, batch, loss_ratio)?;
        theta[i] = original - epsilon;
        unflatten_params(&theta, &mut proj, &mut vhead, &mut chead);
        let (minus, _, _) = forward_and_loss(&proj, &vhead, &chead, batch, loss_ratio)?;
        theta[i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        max_err = max_err.max(relative_error(analytic[i], numeric));
    }
    unflatten_params(&theta, &mut proj, &mut vhead, &mut chead);
    Ok(max_err)
}

/// Negative selection strategy for mining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    /// Most similar non-matching identity: the hardest negative.
    Hardest,
    /// Least similar non-matching identity.
    Easiest,
}

/// Per-instance negative identities in the given embedding space.
///
/// For every instance, scans all identities, skips the ground-truth match,
/// and keeps the `per_instance` best under the mining mode. Ties on distance
/// are broken by identity id ascending.
pub fn mine_negatives(
    instances: &[(String, Vec<f64>)],
    identities: &[(String, Vec<f64>)],
    gt: &HashMap<String, String>,
    mode: MiningMode,
    per_instance: usize,
) -> Result<BTreeMap<String, Vec<String>>> {
    if identities.len() < 2 {
        return Err(Error::Mining(format!(
            "need at least 2 identities to mine negatives, got {}",
            identities.len()
        )));
    }
    if per_instance == 0 || per_instance > identities.len() - 1 {
        return Err(Error::Mining(format!(
            "cannot mine {per_instance} negatives from {} identities",
            identities.len()
        )));
    }
    let mut out = BTreeMap::new();
    for (instance_id, ivec) in instances {
        let gt_id = gt.get(instance_id).ok_or_else(|| {
            Error::Mining(format!("instance {instance_id:?} has no ground-truth identity"))
        })?;
        let mut scored: Vec<(f64, &str)> = identities
            .iter()
            .filter(|(id, _)| id != gt_id)
            .map(|(id, vec)| {
                let mut acc = 0.0f64;
                for (&a, &b) in ivec.iter().zip(vec) {
                    let diff = a - b;
                    acc += diff * diff;
                }
                (acc.sqrt(), id.as_str())
            })
            .collect();
        scored.sort_by(|a, b| match mode {
            MiningMode::Hardest => a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(b.1)),
            MiningMode::Easiest => b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)),
        });
        out.insert(
            instance_id.clone(),
            scored.iter().take(per_instance).map(|(_, id)| id.to_string()).collect(),
        );
    }
    Ok(out)
}

/// Training controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the verification term relative to the attribute term.
    pub loss_ratio: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
    /// Re-mine negatives each epoch in the current projected space; when
    /// false, negatives are sampled uniformly from the non-matching pool.
    pub ohnm: bool,
    pub mining: MiningMode,
    /// Output dimension; `None` keeps the input dimension.
    pub embed_dim: Option<usize>,
    pub fusion: Fusion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_ratio: 10.0,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            negatives_per_positive: 1,
            seed: 0,
            ohnm: true,
            mining: MiningMode::Hardest,
            embed_dim: None,
            fusion: Fusion::SubtractRelu,
        }
    }
}

/// Per-epoch mean loss terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub verification_loss: f64,
    pub classification_loss: f64,
}

/// A trained model with its training curve.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub projection: ProjectionModel,
    pub verification: VerificationHead,
    pub classifier: ClassifierHead,
    pub metrics: Vec<EpochMetrics>,
}

/// Deterministic fresh model for a seed; also the untrained baseline that
/// training starts from.
pub fn init_model(
    input_dim: usize,
    embed_dim: usize,
    classes: usize,
    fusion: Fusion,
    seed: u64,
) -> Result<(ProjectionModel, VerificationHead, ClassifierHead)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = ProjectionModel::new(input_dim, embed_dim, &mut rng)?;
    let vhead = VerificationHead::new(embed_dim, fusion, &mut rng)?;
    let chead = ClassifierHead::new(embed_dim, classes, &mut rng)?;
    Ok((proj, vhead, chead))
}

/// Trains the embedding model on (instance, identity) pairs.
///
/// Every instance contributes one positive pair with its ground-truth
/// identity and `negatives_per_positive` negative pairs per epoch. Pair
/// order is reshuffled each epoch from the seeded generator; the whole run
/// is single-threaded and bitwise deterministic for a given config.
pub fn train_embedding_model(
    instances: &EmbeddingMatrix,
    identities: &EmbeddingMatrix,
    gt: &HashMap<String, String>,
    attributes: &AttributeAssignment,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    if instances.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if identities.len() < 2 {
        return Err(Error::Mining(format!(
            "need at least 2 identities to form negative pairs, got {}",
            identities.len()
        )));
    }
    if instances.dim() != identities.dim() {
        return Err(Error::Shape(format!(
            "instance dim {} does not match identity dim {}",
            instances.dim(),
            identities.dim()
        )));
    }
    if config.negatives_per_positive == 0
        || config.negatives_per_positive > identities.len() - 1
    {
        return Err(Error::Config(format!(
            "negatives_per_positive {} infeasible for {} identities",
            config.negatives_per_positive,
            identities.len()
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(config.learning_rate > 0.0) || !(config.loss_ratio >= 0.0) {
        return Err(Error::Config("learning_rate must be > 0 and loss_ratio >= 0".into()));
    }
    let classes = attributes.k_total();
    // Resolve per-instance ground truth rows and attribute labels up front.
    let mut gt_rows = Vec::with_capacity(instances.len());
    let mut attr_labels = Vec::with_capacity(instances.len());
    for instance_id in instances.ids() {
        let gt_id = gt.get(instance_id).ok_or_else(|| {
            Error::Validation(format!("instance {instance_id:?} has no ground-truth identity"))
        })?;
        let row = identities
            .index_of(gt_id)
            .ok_or_else(|| Error::MissingEntity { id: gt_id.clone() })?;
        let label = *attributes.labels.get(gt_id).ok_or_else(|| {
            Error::Label(format!("identity {gt_id:?} has no attribute label"))
        })?;
        if label >= classes {
            return Err(Error::Label(format!(
                "attribute {label} out of range for {classes} classes"
            )));
        }
        gt_rows.push(row);
        attr_labels.push(label);
    }

    let input_dim = instances.dim();
    let embed_dim = config.embed_dim.unwrap_or(input_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut proj = ProjectionModel::new(input_dim, embed_dim, &mut rng)?;
    let mut vhead = VerificationHead::new(embed_dim, config.fusion, &mut rng)?;
    let mut chead = ClassifierHead::new(embed_dim, classes, &mut rng)?;

    let promote =
        |m: &EmbeddingMatrix, row: usize| m.row(row).iter().map(|&v| v as f64).collect::<Vec<_>>();

    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        // (instance row, identity row, matched) triples for this epoch.
        let mut pairs: Vec<(usize, usize, bool)> = Vec::new();
        if config.ohnm {
            let inst_proj: Vec<(String, Vec<f64>)> = (0..instances.len())
                .map(|r| Ok((instances.id(r).to_string(), proj.project(instances.row(r))?)))
                .collect::<Result<_>>()?;
            let ident_proj: Vec<(String, Vec<f64>)> = (0..identities.len())
                .map(|r| Ok((identities.id(r).to_string(), proj.project(identities.row(r))?)))
                .collect::<Result<_>>()?;
            let negatives = mine_negatives(
                &inst_proj,
                &ident_proj,
                gt,
                config.mining,
                config.negatives_per_positive,
            )?;
            for row in 0..instances.len() {
                pairs.push((row, gt_rows[row], true));
                for neg_id in &negatives[instances.id(row)] {
                    let neg_row = identities.index_of(neg_id).expect("mined from this matrix");
                    pairs.push((row, neg_row, false));
                }
            }
        } else {
            for row in 0..instances.len() {
                pairs.push((row, gt_rows[row], true));
                for _ in 0..config.negatives_per_positive {
                    let neg_row = loop {
                        let cand = rng.gen_range(0..identities.len());
                        if cand != gt_rows[row] {
                            break cand;
                        }
                    };
                    pairs.push((row, neg_row, false));
                }
            }
        }
        pairs.shuffle(&mut rng);

        let mut verification_sum = 0.0f64;
        let mut classification_sum = 0.0f64;
        for chunk in pairs.chunks(config.batch_size) {
            let batch: Vec<PairExample> = chunk
                .iter()
                .map(|&(irow, idrow, matched)| PairExample {
                    instance: promote(instances, irow),
                    identity: promote(identities, idrow),
                    matched,
                    attribute: attr_labels[irow],
                })
                .collect();
            let (_, terms, grads) =
                forward_and_loss(&proj, &vhead, &chead, &batch, config.loss_ratio)?;
            verification_sum += terms.verification * batch.len() as f64;
            classification_sum += terms.classification * batch.len() as f64;
            let lr = config.learning_rate;
            for (param, grad) in [
                (&mut proj.w, &grads.w),
                (&mut proj.b, &grads.b),
                (&mut vhead.v, &grads.v),
                (&mut vhead.c, &grads.c),
                (&mut chead.u, &grads.u),
                (&mut chead.g, &grads.g),
            ] {
                for (p, &gr) in param.iter_mut().zip(grad) {
                    *p -= lr * gr;
                }
            }
        }
        let total = pairs.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            verification_loss: verification_sum / total,
            classification_loss: classification_sum / total,
        });
    }

    Ok(TrainedModel { projection: proj, verification: vhead, classifier: chead, metrics })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    input_dim: usize,
    embed_dim: usize,
    classes: usize,
    fusion: Fusion,
    config: TrainConfig,
}

/// Persists a trained model: every parameter tensor flattened into one row
/// of a binary embedding matrix under a reserved id (rows zero-padded to a
/// common width; true shapes live in `<stem>.meta.json`), plus the training
/// metrics at `<stem>.metrics.jsonl`.
pub fn save_checkpoint<P: AsRef<Path>>(
    stem: P,
    model: &TrainedModel,
    config: &TrainConfig,
) -> Result<()> {
    let stem = stem.as_ref();
    let proj = &model.projection;
    let vhead = &model.verification;
    let chead = &model.classifier;
    let tensors: [(&str, &[f64]); 6] = [
        ("__w", &proj.w),
        ("__b", &proj.b),
        ("__v", &vhead.v),
        ("__c", &vhead.c),
        ("__u", &chead.u),
        ("__g", &chead.g),
    ];
    let width = tensors.iter().map(|(_, t)| t.len()).max().unwrap();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (name, tensor) in tensors {
        ids.push(name.to_string());
        data.extend(tensor.iter().map(|&v| v as f32));
        data.extend(std::iter::repeat(0.0f32).take(width - tensor.len()));
    }
    write_embeddings(with_suffix(stem, ".params.emb"), &EmbeddingMatrix::new(ids, width, data)?)?;

    let meta = CheckpointMeta {
        input_dim: proj.input_dim,
        embed_dim: proj.embed_dim,
        classes: chead.classes,
        fusion: vhead.fusion,
        config: config.clone(),
    };
    let mut writer = BufWriter::new(File::create(with_suffix(stem, ".meta.json"))?);
    serde_json::to_writer_pretty(&mut writer, &meta).map_err(|e| Error::Format(e.to_string()))?;
    writer.write_all(b"\n")?;
    writer.flush()?;

    let mut writer = BufWriter::new(File::create(with_suffix(stem, ".metrics.jsonl"))?);
    for m in &model.metrics {
        serde_json::to_writer(&mut writer, m).map_err(|e| Error::Format(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`]. Parameters come back
/// at f32 precision: identical to `model.quantized()` at save time.
pub fn load_checkpoint<P: AsRef<Path>>(
    stem: P,
) -> Result<(ProjectionModel, VerificationHead, ClassifierHead, TrainConfig)> {
    let stem = stem.as_ref();
    let matrix = crate::ingest::read_embeddings(with_suffix(stem, ".params.emb"))?;
    let meta_file = File::open(with_suffix(stem, ".meta.json"))?;
    let meta: CheckpointMeta = serde_json::from_reader(BufReader::new(meta_file))
        .map_err(|e| Error::Format(e.to_string()))?;
    let expected: [(&str, usize); 6] = [
        ("__w", meta.embed_dim * meta.input_dim),
        ("__b", meta.embed_dim),
        ("__v", 2 * meta.embed_dim),
        ("__c", 2),
        ("__u", meta.classes * meta.embed_dim),
        ("__g", meta.classes),
    ];
    let mut tensors = Vec::with_capacity(6);
    for (name, len) in expected {
        let row = matrix
            .row_of(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
        if len > row.len() {
            return Err(Error::Format(format!("checkpoint tensor {name} too short")));
        }
        if row[len..].iter().any(|&v| v != 0.0) {
            return Err(Error::Format(format!("checkpoint tensor {name} has non-zero padding")));
        }
        tensors.push(row[..len].iter().map(|&v| v as f64).collect::<Vec<f64>>());
    }
    let [w, b, v, c, u, g]: [Vec<f64>; 6] = tensors.try_into().expect("six tensors");
    Ok((
        ProjectionModel { w, b, input_dim: meta.input_dim, embed_dim: meta.embed_dim },
        VerificationHead { fusion: meta.fusion, v, c, embed_dim: meta.embed_dim },
        ClassifierHead { u, g, classes: meta.classes, embed_dim: meta.embed_dim },
        meta.config,
    ))
}

fn with_suffix(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut os = stem.as_os_str().to_os_string();
    os.push(suffix);
    os.into()
}
