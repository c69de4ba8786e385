//! Local training core: pluggable flat-parameter models, mini-batch SGD,
//! accuracy evaluation and dataset handling.
//!
//! Models expose their parameters as a single flat vector so that update
//! arithmetic, sparsification and distance-based scoring stay model-agnostic.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParameterVector;
use crate::seeds::rng_for;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid dimension: {0}")]
    InvalidDim(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite {what} encountered during training")]
    NonFinite { what: &'static str },
    #[error("parameter count {got} does not match model ({expected})")]
    ParamCount { got: usize, expected: usize },
    #[error("cannot split {n} samples into {parts} parts")]
    TooManyParts { n: usize, parts: usize },
    #[error("subset fraction {0} yields an empty subset")]
    EmptySubset(f64),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {format} file {path}: {reason}")]
    Malformed {
        format: &'static str,
        path: String,
        reason: String,
    },
}

/// Model family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelKind {
    SoftmaxRegression,
    MlpOneHidden { hidden: usize },
}

/// Fixed shape of a model: input dimension, class count and family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub classes: usize,
    pub kind: ModelKind,
}

impl ModelSpec {
    pub fn new(input_dim: usize, classes: usize, kind: ModelKind) -> Result<Self, LearnerError> {
        if input_dim < 1 || classes < 1 {
            return Err(LearnerError::InvalidDim(format!(
                "input_dim={input_dim}, classes={classes}"
            )));
        }
        if let ModelKind::MlpOneHidden { hidden } = kind {
            if hidden < 1 {
                return Err(LearnerError::InvalidDim(format!("hidden={hidden}")));
            }
        }
        Ok(Self {
            input_dim,
            classes,
            kind,
        })
    }

    /// Total number of flat parameters P.
    pub fn param_count(&self) -> usize {
        let (f, c) = (self.input_dim, self.classes);
        match self.kind {
            ModelKind::SoftmaxRegression => f * c + c,
            ModelKind::MlpOneHidden { hidden } => hidden * f + hidden + c * hidden + c,
        }
    }
}

/// Labeled samples: an N x F feature matrix and one class label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self, LearnerError> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(LearnerError::InvalidDim(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features[0].len();
        if features.iter().any(|row| row.len() != dim) {
            return Err(LearnerError::InvalidDim("ragged feature rows".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(LearnerError::InvalidDim(format!(
                "label {bad} out of range [0, {classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Hyper-parameters for local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied per round.
    pub decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub model: ModelSpec,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(LearnerError::InvalidDim(format!(
                "learning_rate={}",
                self.learning_rate
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(LearnerError::InvalidDim(format!("decay={}", self.decay)));
        }
        if self.batch_size < 1 || self.local_epochs < 1 {
            return Err(LearnerError::InvalidDim(format!(
                "batch_size={}, local_epochs={}",
                self.batch_size, self.local_epochs
            )));
        }
        Ok(())
    }
}

/// Deterministic model initialization: small uniform weights, zero biases.
/// All participants call this with the same seed in round 0.
pub fn init_model(seed: u64, spec: &ModelSpec) -> ParameterVector {
    let mut rng = rng_for(seed);
    let p = spec.param_count();
    let scale = match spec.kind {
        ModelKind::SoftmaxRegression => 0.1 / (spec.input_dim as f64).sqrt(),
        ModelKind::MlpOneHidden { .. } => 0.5 / (spec.input_dim as f64).sqrt(),
    };
    let mut values = Vec::with_capacity(p);
    for _ in 0..p {
        values.push(rng.gen_range(-1.0..1.0) * scale);
    }
    // Zero the biases so the layout stays easy to reason about.
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let off = spec.input_dim * spec.classes;
            values[off..].iter_mut().for_each(|v| *v = 0.0);
        }
        ModelKind::MlpOneHidden { hidden } => {
            let w1 = hidden * spec.input_dim;
            values[w1..w1 + hidden].iter_mut().for_each(|v| *v = 0.0);
            let w2_end = w1 + hidden + spec.classes * hidden;
            values[w2_end..].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    ParameterVector::new(values).expect("bounded init is finite")
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Class probabilities for one sample under the flat parameters.
fn forward(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
    let (f, c) = (spec.input_dim, spec.classes);
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let bias = f * c;
            let mut logits: Vec<f64> = (0..c)
                .map(|k| {
                    let row = &w[k * f..(k + 1) * f];
                    row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[bias + k]
                })
                .collect();
            softmax_in_place(&mut logits);
            logits
        }
        ModelKind::MlpOneHidden { hidden } => {
            let (h_act, mut logits) = mlp_forward_parts(f, c, hidden, w, x);
            let _ = h_act;
            softmax_in_place(&mut logits);
            logits
        }
    }
}

/// Hidden activations (tanh) and raw logits for the one-hidden-layer MLP.
fn mlp_forward_parts(
    f: usize,
    c: usize,
    hidden: usize,
    w: &[f64],
    x: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let w1 = &w[0..hidden * f];
    let b1 = &w[hidden * f..hidden * f + hidden];
    let w2_off = hidden * f + hidden;
    let w2 = &w[w2_off..w2_off + c * hidden];
    let b2 = &w[w2_off + c * hidden..];
    let h_act: Vec<f64> = (0..hidden)
        .map(|j| {
            let row = &w1[j * f..(j + 1) * f];
            (row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b1[j]).tanh()
        })
        .collect();
    let logits: Vec<f64> = (0..c)
        .map(|k| {
            let row = &w2[k * hidden..(k + 1) * hidden];
            row.iter().zip(&h_act).map(|(a, b)| a * b).sum::<f64>() + b2[k]
        })
        .collect();
    (h_act, logits)
}

/// Mean cross-entropy loss of the model over the given sample indices.
pub fn batch_loss(spec: &ModelSpec, w: &ParameterVector, data: &Dataset, idx: &[usize]) -> f64 {
    let mut total = 0.0;
    for &i in idx {
        let probs = forward(spec, w.as_slice(), &data.features[i]);
        total += -(probs[data.labels[i]].max(1e-300)).ln();
    }
    total / idx.len() as f64
}

/// Analytic gradient of the mean cross-entropy loss over `idx`.
pub fn batch_gradient(
    spec: &ModelSpec,
    w: &ParameterVector,
    data: &Dataset,
    idx: &[usize],
) -> Vec<f64> {
    let (f, c) = (spec.input_dim, spec.classes);
    let mut grad = vec![0.0; spec.param_count()];
    let inv_b = 1.0 / idx.len() as f64;
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let bias = f * c;
            for &i in idx {
                let x = &data.features[i];
                let mut probs = forward(spec, w.as_slice(), x);
                probs[data.labels[i]] -= 1.0;
                for k in 0..c {
                    let g = probs[k] * inv_b;
                    let row = &mut grad[k * f..(k + 1) * f];
                    for (gw, &xv) in row.iter_mut().zip(x) {
                        *gw += g * xv;
                    }
                    grad[bias + k] += g;
                }
            }
        }
        ModelKind::MlpOneHidden { hidden } => {
            let w2_off = hidden * f + hidden;
            let ws = w.as_slice();
            let w2 = &ws[w2_off..w2_off + c * hidden];
            for &i in idx {
                let x = &data.features[i];
                let (h_act, mut logits) = mlp_forward_parts(f, c, hidden, ws, x);
                softmax_in_place(&mut logits);
                logits[data.labels[i]] -= 1.0;
                // Output layer.
                for k in 0..c {
                    let g = logits[k] * inv_b;
                    for j in 0..hidden {
                        grad[w2_off + k * hidden + j] += g * h_act[j];
                    }
                    grad[w2_off + c * hidden + k] += g;
                }
                // Back through tanh into the first layer.
                for j in 0..hidden {
                    let upstream: f64 = (0..c).map(|k| logits[k] * w2[k * hidden + j]).sum();
                    let g = upstream * (1.0 - h_act[j] * h_act[j]) * inv_b;
                    for (fv, &xv) in x.iter().enumerate().map(|(fi, xv)| (fi, xv)) {
                        grad[j * f + fv] += g * xv;
                    }
                    grad[hidden * f + j] += g;
                }
            }
        }
    }
    grad
}

/// Runs `local_epochs` passes of mini-batch SGD with effective rate
/// `learning_rate * decay^round`. Mini-batch order is shuffled once per
/// epoch from `rng_seed`. Deterministic given its inputs.
pub fn local_train(
    w: &ParameterVector,
    data: &Dataset,
    cfg: &LearnerConfig,
    round: u64,
    rng_seed: u64,
) -> Result<ParameterVector, LearnerError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    let spec = &cfg.model;
    if w.len() != spec.param_count() {
        return Err(LearnerError::ParamCount {
            got: w.len(),
            expected: spec.param_count(),
        });
    }
    let eff_lr = cfg.learning_rate * cfg.decay.powi(round as i32);
    let mut rng = rng_for(rng_seed);
    let mut current = w.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let grad = batch_gradient(spec, &current, data, batch);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(LearnerError::NonFinite { what: "gradient" });
            }
            let vals = current.as_mut_slice();
            for (v, g) in vals.iter_mut().zip(&grad) {
                *v -= eff_lr * g;
            }
        }
    }
    if current.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(LearnerError::NonFinite { what: "parameters" });
    }
    Ok(current)
}

/// Fraction of samples whose argmax prediction matches the label.
/// Ties in the class probabilities resolve to the lowest class index.
pub fn evaluate(spec: &ModelSpec, w: &ParameterVector, data: &Dataset) -> f64 {
    assert!(!data.is_empty(), "evaluate requires a nonempty dataset");
    let mut correct = 0usize;
    for i in 0..data.len() {
        let probs = forward(spec, w.as_slice(), &data.features[i]);
        let mut best = 0usize;
        for k in 1..probs.len() {
            if probs[k] > probs[best] {
                best = k;
            }
        }
        if best == data.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / data.len() as f64
}

/// Gaussian blobs, one mean per class, `per_class` samples each.
pub fn make_synthetic_dataset(
    seed: u64,
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
) -> Result<Dataset, LearnerError> {
    if classes < 2 {
        return Err(LearnerError::InvalidDim(format!("classes={classes}")));
    }
    if per_class < 1 || dim < 1 || spread < 0.0 {
        return Err(LearnerError::InvalidDim(format!(
            "per_class={per_class}, dim={dim}, spread={spread}"
        )));
    }
    let mut rng = rng_for(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut features = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            features.push(
                mean.iter()
                    .map(|m| m + spread * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            labels.push(c);
        }
    }
    Dataset::new(features, labels, classes)
}

fn read_file(path: &Path) -> Result<Vec<u8>, LearnerError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| LearnerError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn be_u32(buf: &[u8], off: usize, path: &Path, format: &'static str) -> Result<u32, LearnerError> {
    buf.get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| LearnerError::Malformed {
            format,
            path: path.display().to_string(),
            reason: format!("truncated at offset {off}"),
        })
}

/// Loads a big-endian IDX image file plus the matching IDX label file.
/// Pixel values are scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, LearnerError> {
    let malformed = |path: &Path, reason: String| LearnerError::Malformed {
        format: "idx",
        path: path.display().to_string(),
        reason,
    };

    let img = read_file(images)?;
    let magic = be_u32(&img, 0, images, "idx")?;
    if magic != 0x0000_0803 {
        return Err(malformed(images, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(&img, 4, images, "idx")? as usize;
    let rows = be_u32(&img, 8, images, "idx")? as usize;
    let cols = be_u32(&img, 12, images, "idx")? as usize;
    let dim = rows * cols;
    let pixels = &img[16..];
    if pixels.len() != n * dim {
        return Err(malformed(
            images,
            format!("expected {} pixel bytes, found {}", n * dim, pixels.len()),
        ));
    }

    let lab = read_file(labels)?;
    let lmagic = be_u32(&lab, 0, labels, "idx")?;
    if lmagic != 0x0000_0801 {
        return Err(malformed(labels, format!("bad label magic {lmagic:#010x}")));
    }
    let ln = be_u32(&lab, 4, labels, "idx")? as usize;
    if ln != n {
        return Err(malformed(
            labels,
            format!("{ln} labels for {n} images"),
        ));
    }
    if lab.len() != 8 + n {
        return Err(malformed(labels, "truncated label data".into()));
    }

    let features = pixels
        .chunks(dim)
        .map(|row| row.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    let label_vals: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let classes = label_vals.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(features, label_vals, classes)
}

/// Loads a header CSV whose label column is named "label"; every other
/// column is a numeric feature.
pub fn load_csv(path: &Path) -> Result<Dataset, LearnerError> {
    let malformed = |reason: String| LearnerError::Malformed {
        format: "csv",
        path: path.display().to_string(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    let headers = reader.headers().map_err(|e| malformed(e.to_string()))?;
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| malformed("no \"label\" column".into()))?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| malformed(e.to_string()))?;
        let mut row = Vec::with_capacity(record.len().saturating_sub(1));
        for (i, field) in record.iter().enumerate() {
            if i == label_col {
                labels.push(
                    field
                        .parse::<usize>()
                        .map_err(|_| malformed(format!("bad label {field:?}")))?,
                );
            } else {
                row.push(
                    field
                        .parse::<f64>()
                        .map_err(|_| malformed(format!("bad feature {field:?}")))?,
                );
            }
        }
        features.push(row);
    }
    if features.is_empty() {
        return Err(malformed("no data rows".into()));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(features, labels, classes)
}

/// Random disjoint partition into `n_parts` parts with sizes differing by
/// at most one.
pub fn partition(data: &Dataset, n_parts: usize, seed: u64) -> Result<Vec<Dataset>, LearnerError> {
    if n_parts == 0 || data.len() < n_parts {
        return Err(LearnerError::TooManyParts {
            n: data.len(),
            parts: n_parts,
        });
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng_for(seed));
    let base = data.len() / n_parts;
    let extra = data.len() % n_parts;
    let mut parts = Vec::with_capacity(n_parts);
    let mut off = 0;
    for p in 0..n_parts {
        let size = base + usize::from(p < extra);
        parts.push(data.select(&idx[off..off + size]));
        off += size;
    }
    Ok(parts)
}

/// Random subset of `round(fraction * N)` samples, deterministic per seed.
pub fn eval_subset(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, LearnerError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(LearnerError::EmptySubset(fraction));
    }
    let size = (fraction * data.len() as f64 + 0.5).floor() as usize;
    if size == 0 {
        return Err(LearnerError::EmptySubset(fraction));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng_for(seed));
    idx.truncate(size);
    Ok(data.select(&idx))
}
