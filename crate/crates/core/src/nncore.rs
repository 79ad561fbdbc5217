//! Dense f64 neural-network building blocks shared by the encoder and the
//! stance classifier.
//!
//! Everything here is deliberately small and explicit: row-major 2-D tensors,
//! hand-written forward/backward kernels, Adam with decoupled weight decay,
//! a flatten/unflatten bijection used by the weight-averaging code, central
//! finite-difference gradient checking, and a two-file checkpoint format
//! (JSON manifest + little-endian f64 blob).
//!
//! All arithmetic is f64. Kernels return errors instead of panicking when
//! shapes disagree or inputs are non-finite, so numeric failures surface as
//! diagnosable errors rather than NaN poisoning downstream stages.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors from tensor kernels, the optimizer, and checkpoint I/O.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
    #[error("empty input in {context}")]
    EmptyInput { context: &'static str },
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter name `{0}`")]
    UnknownName(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

// ---------------------------------------------------------------------------
// Tensor2
// ---------------------------------------------------------------------------

/// Row-major 2-D tensor of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NnError::ShapeMismatch {
                context: "Tensor2::from_flat",
                expected: format!("{} values for {rows}x{cols}", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(NnError::EmptyInput {
                context: "Tensor2::from_rows",
            });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NnError::ShapeMismatch {
                    context: "Tensor2::from_rows",
                    expected: format!("{cols} columns"),
                    got: format!("{}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Fill with uniform(-scale, scale) draws from a seeded generator.
    pub fn random_uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        Tensor2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(NnError::ShapeMismatch {
                context: "matmul",
                expected: format!("inner dims to agree ({} vs {})", self.cols, other.rows),
                got: format!("{}x{} · {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix product `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(NnError::ShapeMismatch {
                context: "matmul_tn",
                expected: format!("row counts to agree ({} vs {})", self.rows, other.rows),
                got: format!("{}x{} ᵀ· {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[i * other.cols..(i + 1) * other.cols];
                let dst = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix product `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(NnError::ShapeMismatch {
                context: "matmul_nt",
                expected: format!("column counts to agree ({} vs {})", self.cols, other.cols),
                got: format!("{}x{} ·ᵀ {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let mut out = Tensor2::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let brow = &other.data[j * other.cols..(j + 1) * other.cols];
                out.data[i * other.rows + j] =
                    arow.iter().zip(brow).map(|(&a, &b)| a * b).sum();
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// `y = x·W + b`, where `b` is broadcast across rows.
pub fn linear_forward(x: &Tensor2, w: &Tensor2, b: &[f64]) -> Result<Tensor2> {
    if b.len() != w.cols() {
        return Err(NnError::ShapeMismatch {
            context: "linear_forward bias",
            expected: format!("{} entries", w.cols()),
            got: format!("{}", b.len()),
        });
    }
    let mut y = x.matmul(w)?;
    for r in 0..y.rows() {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
    Ok(y)
}

/// Gradients of `y = x·W + b` given upstream `dy`: returns `(dx, dW, db)`.
pub fn linear_backward(x: &Tensor2, w: &Tensor2, dy: &Tensor2) -> Result<(Tensor2, Tensor2, Vec<f64>)> {
    if dy.rows() != x.rows() || dy.cols() != w.cols() {
        return Err(NnError::ShapeMismatch {
            context: "linear_backward",
            expected: format!("dy of {}x{}", x.rows(), w.cols()),
            got: format!("{}x{}", dy.rows(), dy.cols()),
        });
    }
    let dx = dy.matmul_nt(w)?;
    let dw = x.matmul_tn(dy)?;
    let mut db = vec![0.0; w.cols()];
    for r in 0..dy.rows() {
        for (acc, &g) in db.iter_mut().zip(dy.row(r)) {
            *acc += g;
        }
    }
    Ok((dx, dw, db))
}

/// Mean of the unmasked rows of `rows`.
pub fn mean_pool(rows: &Tensor2, mask: &[bool]) -> Result<Vec<f64>> {
    if mask.len() != rows.rows() {
        return Err(NnError::ShapeMismatch {
            context: "mean_pool mask",
            expected: format!("{} entries", rows.rows()),
            got: format!("{}", mask.len()),
        });
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(NnError::EmptyInput {
            context: "mean_pool: all rows masked",
        });
    }
    let mut out = vec![0.0; rows.cols()];
    for (r, &keep) in mask.iter().enumerate() {
        if keep {
            for (acc, &v) in out.iter_mut().zip(rows.row(r)) {
                *acc += v;
            }
        }
    }
    let inv = 1.0 / n as f64;
    for v in &mut out {
        *v *= inv;
    }
    Ok(out)
}

/// Gradient of [`mean_pool`]: every unmasked row receives `dy / n`.
pub fn mean_pool_backward(dy: &[f64], mask: &[bool]) -> Result<Tensor2> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(NnError::EmptyInput {
            context: "mean_pool_backward: all rows masked",
        });
    }
    let inv = 1.0 / n as f64;
    let mut out = Tensor2::zeros(mask.len(), dy.len());
    for (r, &keep) in mask.iter().enumerate() {
        if keep {
            for (d, &g) in out.row_mut(r).iter_mut().zip(dy) {
                *d = g * inv;
            }
        }
    }
    Ok(out)
}

/// Element-wise tanh.
pub fn tanh_forward(x: &Tensor2) -> Tensor2 {
    let data = x.data().iter().map(|v| v.tanh()).collect();
    Tensor2 {
        rows: x.rows(),
        cols: x.cols(),
        data,
    }
}

/// Gradient through tanh given its output `y`: `dx = dy ⊙ (1 − y²)`.
pub fn tanh_backward(y: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
    if y.shape() != dy.shape() {
        return Err(NnError::ShapeMismatch {
            context: "tanh_backward",
            expected: format!("{:?}", y.shape()),
            got: format!("{:?}", dy.shape()),
        });
    }
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&yv, &g)| g * (1.0 - yv * yv))
        .collect();
    Ok(Tensor2 {
        rows: y.rows(),
        cols: y.cols(),
        data,
    })
}

/// Scale a vector to unit L2 norm; returns the unit vector and the original
/// norm. A norm below 1e-12 is treated as a numeric failure: the direction of
/// a near-zero vector is meaningless and would poison cosine similarities.
pub fn l2_normalize(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(NnError::NonFinite {
            context: "l2_normalize input".into(),
        });
    }
    if norm < 1e-12 {
        return Err(NnError::NonFinite {
            context: "l2_normalize: vector norm below 1e-12".into(),
        });
    }
    Ok((x.iter().map(|v| v / norm).collect(), norm))
}

/// Gradient through `u = x / ‖x‖` given the unit output `u`, the norm, and
/// upstream `du`: `dx = (du − u·(uᵀdu)) / ‖x‖`.
pub fn l2_normalize_backward(unit: &[f64], norm: f64, du: &[f64]) -> Result<Vec<f64>> {
    if unit.len() != du.len() {
        return Err(NnError::ShapeMismatch {
            context: "l2_normalize_backward",
            expected: format!("{} entries", unit.len()),
            got: format!("{}", du.len()),
        });
    }
    let dot: f64 = unit.iter().zip(du).map(|(&u, &g)| u * g).sum();
    Ok(unit
        .iter()
        .zip(du)
        .map(|(&u, &g)| (g - u * dot) / norm)
        .collect())
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Tensor2) -> Result<Tensor2> {
    if !logits.is_finite() {
        return Err(NnError::NonFinite {
            context: "softmax_rows input".into(),
        });
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood over a batch plus its gradient.
///
/// Returns `(loss, dlogits)` with `dlogits = (softmax(logits) − onehot) / B`,
/// so the gradient is already scaled for the batch-mean loss.
pub fn softmax_cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    if labels.len() != logits.rows() {
        return Err(NnError::ShapeMismatch {
            context: "softmax_cross_entropy labels",
            expected: format!("{} labels", logits.rows()),
            got: format!("{}", labels.len()),
        });
    }
    if logits.rows() == 0 {
        return Err(NnError::EmptyInput {
            context: "softmax_cross_entropy",
        });
    }
    for &l in labels {
        if l >= logits.cols() {
            return Err(NnError::LabelOutOfRange {
                label: l,
                classes: logits.cols(),
            });
        }
    }
    let probs = softmax_rows(logits)?;
    let batch = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &label) in labels.iter().enumerate() {
        // Clamp avoids -inf on an exactly-zero probability, which can only
        // arise from extreme logits; the gradient stays exact either way.
        loss -= probs.get(r, label).max(1e-300).ln();
        let g = grad.row_mut(r);
        g[label] -= 1.0;
        for v in g.iter_mut() {
            *v /= batch;
        }
    }
    loss /= batch;
    if !loss.is_finite() {
        return Err(NnError::NonFinite {
            context: "softmax_cross_entropy loss".into(),
        });
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Parameter sets
// ---------------------------------------------------------------------------

/// An ordered collection of named tensors. Order is part of the contract: the
/// flatten/unflatten bijection and the checkpoint layout both follow it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor2)>,
}

/// Tensor names and shapes, in order — the layout key for flatten/unflatten
/// and for checkpoint compatibility checks.
pub type Schema = Vec<(String, usize, usize)>;

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor2) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(NnError::DuplicateName(name.to_string()));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::UnknownName(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::UnknownName(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_coords(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, t)| t.rows() * t.cols())
            .sum()
    }

    pub fn schema(&self) -> Schema {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.rows(), t.cols()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Concatenate every tensor's row-major data, in entry order.
pub fn flatten(params: &ParamSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.n_coords());
    for (_, t) in params.iter() {
        out.extend_from_slice(t.data());
    }
    out
}

/// Rebuild a [`ParamSet`] from a flat vector and a schema. Inverse of
/// [`flatten`] for matching schemas.
pub fn unflatten(flat: &[f64], schema: &Schema) -> Result<ParamSet> {
    let expected: usize = schema.iter().map(|(_, r, c)| r * c).sum();
    if flat.len() != expected {
        return Err(NnError::ShapeMismatch {
            context: "unflatten",
            expected: format!("{expected} coordinates"),
            got: format!("{}", flat.len()),
        });
    }
    let mut params = ParamSet::new();
    let mut offset = 0;
    for (name, rows, cols) in schema {
        let n = rows * cols;
        let tensor = Tensor2::from_flat(*rows, *cols, flat[offset..offset + n].to_vec())?;
        params.push(name, tensor)?;
        offset += n;
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Training-run hyperparameters. One of these identifies a sweep
/// configuration and travels inside every checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(NnError::BadHyper(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(NnError::BadHyper(format!(
                "weight_decay must be non-negative and finite, got {}",
                self.weight_decay
            )));
        }
        // epochs == 0 is legal: a zero-epoch run returns the initialization
        // (plus a fresh head) with its validation accuracy recorded.
        if self.batch_size == 0 {
            return Err(NnError::BadHyper("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam moment state, one slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    schema: Schema,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state with the standard moment coefficients
    /// (β1 = 0.9, β2 = 0.999, ε = 1e-8).
    pub fn new(params: &ParamSet) -> Self {
        let schema = params.schema();
        let m = schema.iter().map(|(_, r, c)| vec![0.0; r * c]).collect();
        let v = schema.iter().map(|(_, r, c)| vec![0.0; r * c]).collect();
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schema,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with decoupled weight decay.
///
/// Decay is applied first, multiplicatively (`p ← p − lr·wd·p`), then the
/// bias-corrected Adam delta — so decay never flows through the moment
/// estimates. Rejects non-finite gradients with a numeric-failure error.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.schema() != state.schema {
        return Err(NnError::ShapeMismatch {
            context: "adam_step params vs state",
            expected: format!("{:?}", state.schema),
            got: format!("{:?}", params.schema()),
        });
    }
    if grads.schema() != state.schema {
        return Err(NnError::ShapeMismatch {
            context: "adam_step grads vs state",
            expected: format!("{:?}", state.schema),
            got: format!("{:?}", grads.schema()),
        });
    }
    if !grads.is_finite() {
        return Err(NnError::NonFinite {
            context: "adam_step gradients".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (slot, (name, _, _)) in state.schema.clone().iter().enumerate() {
        let g = grads.get(name)?.data().to_vec();
        let p = params.get_mut(name)?.data_mut();
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for i in 0..p.len() {
            p[i] -= learning_rate * weight_decay * p[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    if !params.is_finite() {
        return Err(NnError::NonFinite {
            context: "adam_step parameters after update".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Result of a finite-difference gradient audit.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over the checked coordinates.
    pub max_rel_err: f64,
    /// How many coordinates were checked.
    pub checked: usize,
}

/// Compare an analytic gradient against central finite differences.
///
/// For each checked coordinate i, perturbs `params[i] ± eps`, evaluates
/// `loss`, and compares `(f₊ − f₋) / 2eps` against `analytic[i]` using
/// `|num − ana| / max(|num| + |ana|, 1e-8)`. Above 10 000 coordinates a
/// seeded random subsample of exactly 10 000 is checked instead of all.
pub fn grad_check<F>(
    mut loss: F,
    params: &ParamSet,
    analytic: &ParamSet,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if analytic.schema() != params.schema() {
        return Err(NnError::ShapeMismatch {
            context: "grad_check analytic vs params",
            expected: format!("{:?}", params.schema()),
            got: format!("{:?}", analytic.schema()),
        });
    }
    let flat = flatten(params);
    let grad = flatten(analytic);
    let schema = params.schema();
    let total = flat.len();
    const LIMIT: usize = 10_000;
    let indices: Vec<usize> = if total <= LIMIT {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < LIMIT {
            picked.insert(rng.random_range(0..total));
        }
        picked.into_iter().collect()
    };
    let mut max_rel = 0.0_f64;
    let mut work = flat.clone();
    for &i in &indices {
        let orig = work[i];
        work[i] = orig + eps;
        let f_plus = loss(&unflatten(&work, &schema)?)?;
        work[i] = orig - eps;
        let f_minus = loss(&unflatten(&work, &schema)?)?;
        work[i] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let rel = (numeric - grad[i]).abs() / (numeric.abs() + grad[i].abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked: indices.len(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// A named, fine-tuned (or averaged) parameter state.
///
/// `shared_init_id` identifies the common initialization a family of
/// checkpoints was fine-tuned from; weight averaging refuses to mix families.
/// `hyper` is the training configuration (absent for averaged checkpoints),
/// and `val_accuracy` is the validation accuracy recorded after training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub shared_init_id: String,
    pub hyper: Option<HyperConfig>,
    pub val_accuracy: Option<f64>,
    /// Free-form provenance (config hash, seeds, stage name). Serialized into
    /// the manifest so every artifact records how it was produced.
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// On-disk manifest, stored as `<stem>.json` next to `<stem>.bin`.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    tensors: Vec<TensorEntry>,
    shared_init_id: String,
    hyper: Option<HyperConfig>,
    val_accuracy: Option<f64>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

const CHECKPOINT_FORMAT: &str = "dense-f64-v1";

impl Checkpoint {
    pub fn new(params: ParamSet, shared_init_id: &str) -> Self {
        Checkpoint {
            params,
            shared_init_id: shared_init_id.to_string(),
            hyper: None,
            val_accuracy: None,
            meta: BTreeMap::new(),
        }
    }

    /// Write `<stem>.json` (manifest) and `<stem>.bin` (little-endian f64
    /// blob, tensors concatenated in schema order, rows-major).
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        if !self.params.is_finite() {
            return Err(NnError::NonFinite {
                context: format!("checkpoint save {}", stem.display()),
            });
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
            shared_init_id: self.shared_init_id.clone(),
            hyper: self.hyper.clone(),
            val_accuracy: self.val_accuracy,
            meta: self.meta.clone(),
        };
        let json_path = stem.with_extension("json");
        let bin_path = stem.with_extension("bin");
        if let Some(parent) = stem.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        std::fs::write(&json_path, json)?;
        let mut blob = Vec::with_capacity(self.params.n_coords() * 8);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(&bin_path)?;
        f.write_all(&blob)?;
        Ok((json_path, bin_path))
    }

    /// Load a checkpoint saved by [`Checkpoint::save`]. Validates the format
    /// tag, the blob length against the manifest shapes, and finiteness.
    pub fn load(stem: &Path) -> Result<Checkpoint> {
        let json_path = stem.with_extension("json");
        let bin_path = stem.with_extension("bin");
        let manifest: CheckpointManifest =
            serde_json::from_str(&std::fs::read_to_string(&json_path)?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(NnError::BadCheckpoint(format!(
                "unsupported format `{}` in {}",
                manifest.format,
                json_path.display()
            )));
        }
        let mut blob = Vec::new();
        std::fs::File::open(&bin_path)?.read_to_end(&mut blob)?;
        let expected: usize = manifest.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
        if blob.len() != expected {
            return Err(NnError::BadCheckpoint(format!(
                "{}: expected {} bytes for the manifest shapes, found {}",
                bin_path.display(),
                expected,
                blob.len()
            )));
        }
        let mut params = ParamSet::new();
        let mut offset = 0;
        for entry in &manifest.tensors {
            let n = entry.rows * entry.cols;
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let start = offset + i * 8;
                let bytes: [u8; 8] = blob[start..start + 8].try_into().unwrap();
                data.push(f64::from_le_bytes(bytes));
            }
            offset += n * 8;
            params.push(&entry.name, Tensor2::from_flat(entry.rows, entry.cols, data)?)?;
        }
        if !params.is_finite() {
            return Err(NnError::BadCheckpoint(format!(
                "{}: non-finite parameter values",
                bin_path.display()
            )));
        }
        Ok(Checkpoint {
            params,
            shared_init_id: manifest.shared_init_id,
            hyper: manifest.hyper,
            val_accuracy: manifest.val_accuracy,
            meta: manifest.meta,
        })
    }
}

/// Derive a stable 64-bit seed from a context string and a base seed.
/// Used to give each training component (head init, batch order, …) its own
/// independent stream while keeping everything reproducible.
pub fn derive_seed(context: &str, seed: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(context.as_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Derive a stable hex identifier from a context string and a seed, for
/// tagging a fresh shared initialization.
pub fn derive_id(context: &str, seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(context.as_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(32);
    for b in &digest[..16] {
        let _ = write!(out, "{b:02x}");
    }
    out
}
