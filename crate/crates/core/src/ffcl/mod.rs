//! Forward-forward contrastive learning: goodness utilities, layer-local and
//! global contrastive pretraining, and focal-loss fine-tuning.

mod train;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError};
use crate::numerics::{sigmoid, softplus, NumericsError, Tensor};
use crate::patchflow::{PatchError, PatchRecord};

pub use train::{
    evaluate_focal_loss, finetune, global_probe_loss, predict_grid, predict_patch, predict_probabilities, pretrain_global, pretrain_local,
    FinetuneOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum FfclError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training needs both classes (positives {positives}, negatives {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("non-finite parameter `{param}` after {stage} epoch {epoch} step {step}")]
    NonFinite {
        stage: TrainStage,
        epoch: usize,
        step: usize,
        param: String,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Sum of squared activities.
pub fn goodness(h: &[f32]) -> f64 {
    h.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
}

/// Probability that an input is positive under the goodness model, `σ(G − θ)`.
pub fn prob_positive(g: f64, theta: f64) -> f64 {
    sigmoid(g - theta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FfaParams {
    pub theta: f64,
}

impl Default for FfaParams {
    fn default() -> Self {
        Self { theta: 2.0 }
    }
}

/// `1 − cos` for a same-class pair, `max(0, cos)` otherwise.
pub fn cosine_embedding_loss(e1: &[f32], e2: &[f32], c1: u8, c2: u8) -> Result<f64, FfclError> {
    if e1.len() != e2.len() || e1.is_empty() {
        return Err(FfclError::Contract(format!(
            "embeddings must be non-empty and equal length ({} vs {})",
            e1.len(),
            e2.len()
        )));
    }
    if c1 > 1 || c2 > 1 {
        return Err(FfclError::Contract(format!("labels must be 0 or 1, got {c1} and {c2}")));
    }
    let (mut dot, mut n1, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in e1.iter().zip(e2) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    if n1 == 0.0 || n2 == 0.0 {
        return Err(FfclError::Contract("cosine loss of a zero-norm embedding".into()));
    }
    let cos = dot / (n1.sqrt() * n2.sqrt());
    Ok(if c1 == c2 { 1.0 - cos } else { cos.max(0.0) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.8, gamma: 3.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<(), FfclError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(FfclError::Config(format!("focal alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(FfclError::Config(format!("focal gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }

    /// Class weight: `α` for positives, `1 − α` for negatives.
    pub fn alpha_t(&self, y: u8) -> f64 {
        if y == 1 {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

/// `−α_t (1 − p_t)^γ ln p_t` with `p_t = p` for `y = 1` and `1 − p` otherwise.
pub fn focal_loss(p: f64, y: u8, fp: &FocalParams) -> Result<f64, FfclError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(FfclError::Contract(format!("probability {p} outside (0, 1)")));
    }
    if y > 1 {
        return Err(FfclError::Contract(format!("label {y} is not binary")));
    }
    let pt = if y == 1 { p } else { 1.0 - p };
    Ok(-fp.alpha_t(y) * (1.0 - pt).powf(fp.gamma) * pt.ln())
}

/// Focal loss evaluated from a logit without forming `p`, matching the
/// training graph.
pub fn focal_loss_from_logit(z: f64, y: u8, fp: &FocalParams) -> f64 {
    let zs = if y == 1 { z } else { -z };
    fp.alpha_t(y) * sigmoid(-zs).powf(fp.gamma) * softplus(-zs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStage {
    Local,
    Global,
    Finetune,
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainStage::Local => "local",
            TrainStage::Global => "global",
            TrainStage::Finetune => "finetune",
        })
    }
}

impl FromStr for TrainStage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(TrainStage::Local),
            "global" => Ok(TrainStage::Global),
            "finetune" => Ok(TrainStage::Finetune),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

/// Per-block objective for local pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalObjective {
    /// Cosine embedding loss on pairs of pooled block embeddings.
    Cosine,
    /// Logistic goodness loss `softplus(∓(G − θ))` on single samples.
    Goodness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub patience: usize,
    pub seed: u64,
    pub stage: TrainStage,
    pub local_objective: LocalObjective,
    /// Let the projection layer take part in local pretraining (last block).
    pub local_train_projection: bool,
    pub ffa: FfaParams,
    /// Optional cap on batches per epoch; `None` runs full epochs.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 10,
            lr0: 1e-4,
            lr_min: 0.0,
            patience: 5,
            seed: 0,
            stage: TrainStage::Finetune,
            local_objective: LocalObjective::Cosine,
            local_train_projection: false,
            ffa: FfaParams::default(),
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FfclError> {
        if self.epochs < 1 {
            return Err(FfclError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(FfclError::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.patience < 1 {
            return Err(FfclError::Config("patience must be >= 1".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr_min >= 0.0 && self.lr0.is_finite() && self.lr_min.is_finite()) {
            return Err(FfclError::Config("learning rates must be finite and >= 0".into()));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(FfclError::Config("max_batches_per_epoch must be >= 1".into()));
        }
        if !self.ffa.theta.is_finite() {
            return Err(FfclError::Config("ffa.theta must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastivePair<'a> {
    pub x1: &'a Tensor,
    pub x2: &'a Tensor,
    pub c1: u8,
    pub c2: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: String,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Per-epoch training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,stage,train_loss,val_loss,lr";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.stage, r.train_loss, val, r.lr));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), FfclError> {
        std::fs::File::create(path)?.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Rows whose stage column equals `stage`.
    pub fn stage_rows<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a LogRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }
}

/// Mean cosine similarity over same-class pairs of the final-block pooled
/// embeddings; a diagnostic for local pretraining.
pub fn mean_same_class_cosine(model: &Model, patches: &[PatchRecord]) -> Result<f64, FfclError> {
    let embs: Vec<(Vec<f32>, u8)> = patches
        .iter()
        .map(|p| {
            let e = model.forward_embed(&p.pixels)?;
            Ok((e.per_block.last().expect("num_blocks >= 1").clone(), p.label))
        })
        .collect::<Result<_, FfclError>>()?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            if embs[i].1 == embs[j].1 {
                if let Ok(l) = cosine_embedding_loss(&embs[i].0, &embs[j].0, 0, 0) {
                    sum += 1.0 - l;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(FfclError::Contract("no same-class pairs with non-zero embeddings".into()));
    }
    Ok(sum / n as f64)
}
