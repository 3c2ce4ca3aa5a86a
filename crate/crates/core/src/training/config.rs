use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::{Error, Result};

/// Peak learning rate of hidden-state and attention transfer.
pub const DISTILL_PEAK_LR: f64 = 5e-4;
/// Peak learning rate of output transfer run after hidden-state transfer.
pub const OD_AFTER_DISTILL_PEAK_LR: f64 = 3e-4;
pub const WARMUP_FRACTION: f64 = 0.05;
pub const FULL_BATCH_SIZE: usize = 32;
pub const FULL_SEQ_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "teacher-pretrain")]
    TeacherPretrain,
    #[serde(rename = "distill")]
    Distill,
    #[serde(rename = "od-after-distill")]
    OdAfterDistill,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TeacherPretrain => "teacher-pretrain",
            Stage::Distill => "distill",
            Stage::OdAfterDistill => "od-after-distill",
        }
    }
}

fn default_mask_prob() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Sequences longer than this are truncated.
    pub seq_len: usize,
    pub seed: u64,
    pub stage: Stage,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_grad_norm: Option<f64>,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
}

impl TrainConfig {
    /// Reference-scale settings. `total_steps` is a placeholder: epochs have
    /// no fixed step equivalent, so callers set it for their corpus.
    pub fn full_scale(stage: Stage) -> Self {
        Self {
            peak_lr: match stage {
                Stage::OdAfterDistill => OD_AFTER_DISTILL_PEAK_LR,
                _ => DISTILL_PEAK_LR,
            },
            warmup_fraction: WARMUP_FRACTION,
            total_steps: 100_000,
            batch_size: FULL_BATCH_SIZE,
            seq_len: FULL_SEQ_LEN,
            seed: 0,
            stage,
            optimizer: AdamWConfig::default(),
            clip_grad_norm: None,
            mask_prob: default_mask_prob(),
        }
    }

    /// CPU-minute budgets with the same schedule shape; learning rates keep the
    /// 5 : 3 ratio between transfer and the later output stage.
    pub fn desk(stage: Stage) -> Self {
        let (peak_lr, total_steps) = match stage {
            Stage::TeacherPretrain => (2e-3, 4000),
            Stage::Distill => (2e-3, 1200),
            Stage::OdAfterDistill => (2e-3 * 0.6, 1200),
        };
        Self {
            peak_lr,
            total_steps,
            batch_size: 16,
            seq_len: crate::transformer::DESK_MAX_SEQ_LEN,
            ..Self::full_scale(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.seq_len < 2 {
            return bad("total_steps and batch_size must be positive and seq_len at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob {} outside [0, 1]", self.mask_prob));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_grad_norm must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        super::lr_at(step, self.peak_lr, self.warmup_fraction, self.total_steps)
    }
}
