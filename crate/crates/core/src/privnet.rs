//! Concept-bottleneck classifier: images are represented by their cosine
//! association with each descriptor, and a bias-free linear layer maps the
//! association vector to class logits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::Bundle;
use crate::descriptors::Descriptor;
use crate::linalg;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PrivnetError {
    #[error("no descriptors: the bottleneck would be empty")]
    NoDescriptors,
    #[error("image {0} has a zero-norm embedding")]
    ZeroNormEmbedding(String),
    #[error("row {0} has no label")]
    UnlabeledRow(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("expected a vector of length {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model file is not schema version {MODEL_SCHEMA_VERSION} (found {found:?})")]
    SchemaVersionMismatch { found: Option<u64> },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Image-descriptor cosine scores, rows are images and columns descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationMatrix {
    pub image_ids: Vec<String>,
    pub descriptor_ids: Vec<usize>,
    /// Row-major, `image_ids.len() * descriptor_ids.len()` entries.
    pub scores: Vec<f64>,
}

impl AssociationMatrix {
    pub fn new(image_ids: Vec<String>, descriptor_ids: Vec<usize>, scores: Vec<f64>) -> Result<Self, PrivnetError> {
        let expected = image_ids.len() * descriptor_ids.len();
        if scores.len() != expected {
            return Err(PrivnetError::DimensionMismatch {
                expected,
                found: scores.len(),
            });
        }
        Ok(AssociationMatrix {
            image_ids,
            descriptor_ids,
            scores,
        })
    }

    pub fn rows(&self) -> usize {
        self.image_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.descriptor_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.scores[i * n..(i + 1) * n]
    }

    /// Sub-matrix of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> AssociationMatrix {
        AssociationMatrix {
            image_ids: rows.iter().map(|&i| self.image_ids[i].clone()).collect(),
            descriptor_ids: self.descriptor_ids.clone(),
            scores: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
        }
    }
}

/// Scores every requested bundle row (outliers included) against every descriptor,
/// using the full joint-space image embeddings.
pub fn association_matrix(
    bundle: &Bundle,
    rows: &[usize],
    descriptors: &[Descriptor],
) -> Result<AssociationMatrix, PrivnetError> {
    if descriptors.is_empty() {
        return Err(PrivnetError::NoDescriptors);
    }
    let embeddings: Vec<Vec<f64>> = descriptors
        .iter()
        .map(|d| linalg::normalized(&d.embedding).ok_or_else(|| PrivnetError::ZeroNormEmbedding(d.name.clone())))
        .collect::<Result<_, _>>()?;
    let scored: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|&r| {
            let x = bundle.image_embeddings.row(r);
            let x = linalg::normalized(x).ok_or_else(|| PrivnetError::ZeroNormEmbedding(bundle.records[r].id.clone()))?;
            Ok(embeddings.iter().map(|e| linalg::dot(&x, e).clamp(-1.0, 1.0)).collect())
        })
        .collect::<Result<_, PrivnetError>>()?;
    AssociationMatrix::new(
        rows.iter().map(|&r| bundle.records[r].id.clone()).collect(),
        descriptors.iter().map(|d| d.cluster_id).collect(),
        scored.into_iter().flatten().collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 0.01,
            batch: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PrivnetError> {
        if self.batch == 0 {
            return Err(PrivnetError::InvalidConfig("batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(PrivnetError::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub schema_version: u32,
    /// `|Y| x N`; there are no bias terms.
    pub weights: Vec<Vec<f64>>,
    pub class_names: Vec<String>,
    pub descriptors: Vec<Descriptor>,
    pub train_meta: TrainMeta,
}

impl LinearModel {
    pub fn new(
        weights: Vec<Vec<f64>>,
        class_names: Vec<String>,
        descriptors: Vec<Descriptor>,
        train_meta: TrainMeta,
    ) -> Result<Self, PrivnetError> {
        if weights.len() != class_names.len() {
            return Err(PrivnetError::DimensionMismatch {
                expected: class_names.len(),
                found: weights.len(),
            });
        }
        if let Some(row) = weights.iter().find(|w| w.len() != descriptors.len()) {
            return Err(PrivnetError::DimensionMismatch {
                expected: descriptors.len(),
                found: row.len(),
            });
        }
        Ok(LinearModel {
            schema_version: MODEL_SCHEMA_VERSION,
            weights,
            class_names,
            descriptors,
            train_meta,
        })
    }

    pub fn n_descriptors(&self) -> usize {
        self.descriptors.len()
    }

    pub fn logits(&self, v: &[f64]) -> Result<Vec<f64>, PrivnetError> {
        if v.len() != self.n_descriptors() {
            return Err(PrivnetError::DimensionMismatch {
                expected: self.n_descriptors(),
                found: v.len(),
            });
        }
        Ok(logits(&self.weights, v))
    }

    /// Predicted class (ties go to the lower index) and the logits.
    pub fn predict(&self, v: &[f64]) -> Result<(usize, Vec<f64>), PrivnetError> {
        let z = self.logits(v)?;
        Ok((argmax(&z), z))
    }

    pub fn predict_all(&self, s: &AssociationMatrix) -> Result<Vec<usize>, PrivnetError> {
        (0..s.rows()).map(|i| self.predict(s.row(i)).map(|p| p.0)).collect()
    }
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = c;
        }
    }
    best
}

fn logits(w: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    w.iter().map(|row| linalg::dot(row, v)).collect()
}

/// Mean softmax cross-entropy over `rows` and its gradient with respect to `w`.
pub fn loss_and_gradient(
    w: &[Vec<f64>],
    s: &AssociationMatrix,
    labels: &[usize],
    rows: &[usize],
) -> (f64, Vec<Vec<f64>>) {
    let n = s.cols();
    let mut grad = vec![vec![0.0; n]; w.len()];
    let mut loss = 0.0;
    for &i in rows {
        let v = s.row(i);
        let z = logits(w, v);
        let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = hi + z.iter().map(|x| (x - hi).exp()).sum::<f64>().ln();
        loss += lse - z[labels[i]];
        for (c, g) in grad.iter_mut().enumerate() {
            let p = (z[c] - lse).exp() - if c == labels[i] { 1.0 } else { 0.0 };
            for (gj, vj) in g.iter_mut().zip(v) {
                *gj += p * vj;
            }
        }
    }
    let m = rows.len().max(1) as f64;
    for g in grad.iter_mut().flatten() {
        *g /= m;
    }
    (loss / m, grad)
}

fn checked_labels(labels: &[Option<usize>], classes: usize) -> Result<Vec<usize>, PrivnetError> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let l = l.ok_or(PrivnetError::UnlabeledRow(i))?;
            if l >= classes {
                return Err(PrivnetError::LabelOutOfRange { label: l, classes });
            }
            Ok(l)
        })
        .collect()
}

/// Mean cross-entropy of `model` on labeled rows.
pub fn mean_loss(model: &LinearModel, s: &AssociationMatrix, labels: &[Option<usize>]) -> Result<f64, PrivnetError> {
    let y = checked_labels(labels, model.class_names.len())?;
    let rows: Vec<usize> = (0..s.rows()).collect();
    Ok(loss_and_gradient(&model.weights, s, &y, &rows).0)
}

/// Fits the bias-free layer with Adam on shuffled mini-batches for exactly
/// `cfg.epochs` epochs and returns the final-epoch weights.
pub fn train(
    s: &AssociationMatrix,
    labels: &[Option<usize>],
    class_names: Vec<String>,
    descriptors: Vec<Descriptor>,
    cfg: &TrainConfig,
) -> Result<LinearModel, PrivnetError> {
    cfg.validate()?;
    let n = s.cols();
    if n == 0 || descriptors.is_empty() {
        return Err(PrivnetError::NoDescriptors);
    }
    if descriptors.len() != n {
        return Err(PrivnetError::DimensionMismatch {
            expected: n,
            found: descriptors.len(),
        });
    }
    if labels.len() != s.rows() {
        return Err(PrivnetError::DimensionMismatch {
            expected: s.rows(),
            found: labels.len(),
        });
    }
    let classes = class_names.len();
    if classes < 2 {
        return Err(PrivnetError::InvalidConfig("at least two classes are needed".into()));
    }
    let y = checked_labels(labels, classes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 1.0 / (n as f64).sqrt();
    let mut w: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
        .collect();
    let mut m1 = vec![vec![0.0; n]; classes];
    let mut m2 = vec![vec![0.0; n]; classes];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..s.rows()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let (loss, grad) = loss_and_gradient(&w, s, &y, batch);
            if !loss.is_finite() {
                return Err(PrivnetError::NonFiniteLoss(epoch));
            }
            step += 1;
            let c1 = 1.0 - BETA1.powi(step);
            let c2 = 1.0 - BETA2.powi(step);
            for c in 0..classes {
                for j in 0..n {
                    let g = grad[c][j];
                    m1[c][j] = BETA1 * m1[c][j] + (1.0 - BETA1) * g;
                    m2[c][j] = BETA2 * m2[c][j] + (1.0 - BETA2) * g * g;
                    w[c][j] -= cfg.lr * (m1[c][j] / c1) / ((m2[c][j] / c2).sqrt() + EPS);
                }
            }
        }
    }

    let all: Vec<usize> = (0..s.rows()).collect();
    let (final_train_loss, _) = loss_and_gradient(&w, s, &y, &all);
    if !final_train_loss.is_finite() {
        return Err(PrivnetError::NonFiniteLoss(cfg.epochs));
    }
    LinearModel::new(
        w,
        class_names,
        descriptors,
        TrainMeta {
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch: cfg.batch,
            seed: cfg.seed,
            final_train_loss,
            final_val_loss: None,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Percentages throughout, unrounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub u_ba: f64,
    pub u_f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
    /// Set when a precision or recall was undefined and reported as 0.
    pub warnings: Vec<String>,
}

impl Metrics {
    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|c| c.class == name)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Confusion-matrix metrics from class indices.
pub fn metrics_from_predictions(
    truth: &[usize],
    predicted: &[usize],
    class_names: &[String],
) -> Result<Metrics, PrivnetError> {
    if truth.is_empty() {
        return Err(PrivnetError::EmptyTestSet);
    }
    if truth.len() != predicted.len() {
        return Err(PrivnetError::DimensionMismatch {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    let k = class_names.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        for l in [t, p] {
            if l >= k {
                return Err(PrivnetError::LabelOutOfRange { label: l, classes: k });
            }
        }
        confusion[t][p] += 1;
    }
    let mut warnings = Vec::new();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted_c: usize = (0..k).map(|t| confusion[t][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let precision = ratio(tp, predicted_c).unwrap_or_else(|| {
                warnings.push(format!("precision of {} undefined (never predicted); reported as 0", class_names[c]));
                0.0
            });
            let recall = ratio(tp, support).unwrap_or_else(|| {
                warnings.push(format!("recall of {} undefined (no true samples); reported as 0", class_names[c]));
                0.0
            });
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                class: class_names[c].clone(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let u_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Metrics {
        per_class,
        u_ba: 100.0 * correct as f64 / truth.len() as f64,
        u_f1,
        confusion,
        total: truth.len(),
        warnings,
    })
}

pub fn evaluate(model: &LinearModel, s: &AssociationMatrix, labels: &[Option<usize>]) -> Result<Metrics, PrivnetError> {
    if s.rows() == 0 {
        return Err(PrivnetError::EmptyTestSet);
    }
    let truth = checked_labels(labels, model.class_names.len())?;
    let predicted = model.predict_all(s)?;
    metrics_from_predictions(&truth, &predicted, &model.class_names)
}

pub fn persist_model(model: &LinearModel, path: &Path) -> Result<(), PrivnetError> {
    let json = serde_json::to_string_pretty(model).expect("model serializes");
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<LinearModel, PrivnetError> {
    let text = std::fs::read_to_string(path)?;
    parse_model(&text)
}

pub fn parse_model(text: &str) -> Result<LinearModel, PrivnetError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|_| PrivnetError::SchemaVersionMismatch { found: None })?;
    let found = value.get("schema_version").and_then(|v| v.as_u64());
    if found != Some(MODEL_SCHEMA_VERSION as u64) {
        return Err(PrivnetError::SchemaVersionMismatch { found });
    }
    let model: LinearModel =
        serde_json::from_value(value).map_err(|_| PrivnetError::SchemaVersionMismatch { found })?;
    LinearModel::new(model.weights, model.class_names, model.descriptors, model.train_meta)
}
