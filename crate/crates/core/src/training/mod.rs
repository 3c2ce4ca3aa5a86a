//! AdamW, the warmup/decay schedule and the training loops.

mod config;
mod distill;
mod manifest;
mod optim;
mod pretrain;
mod probe;
mod schedule;
pub mod stream;

pub use config::{Stage, TrainConfig, DISTILL_PEAK_LR, OD_AFTER_DISTILL_PEAK_LR, WARMUP_FRACTION};
pub use distill::{distill, distill_multistage, DistillOutcome, MultiStageOutcome};
pub use manifest::{smoothed_endpoints, write_loss_csv, LossRecord, RunManifest, StageRecord};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use pretrain::{mlm_accuracy, mlm_loss, pretrain_teacher, MlmEval, PretrainOutcome};
pub use probe::{evaluate_probe, first_position_features, probe_finetune, ProbeConfig, ProbeOutcome, ProbeTask};
pub use schedule::{lr_at, warmup_steps};

use crate::tensor::Gradients;
use crate::{Error, Result, Tensor, Var};

/// Stream key of dropout masks, distinct from batch sampling.
const DROPOUT_STREAM: u64 = 0x6472_6f70;

/// Optimizer plus schedule bookkeeping shared by the loops.
struct Updater {
    opt: AdamW,
    cfg: TrainConfig,
}

impl Updater {
    fn new<'a>(cfg: &TrainConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self { opt: AdamW::new(cfg.optimizer, params), cfg: cfg.clone() }
    }

    /// Applies one step; `g` is parallel to `params`.
    fn apply(&mut self, step: usize, params: &mut [&mut Tensor], mut g: Vec<Option<Vec<f64>>>) -> Result<f64> {
        if let Some(max) = self.cfg.clip_grad_norm {
            clip_grad_norm(&mut g, max);
        }
        let lr = self.cfg.lr_at(step);
        self.opt.step(params, &g, lr)?;
        Ok(lr)
    }
}

/// Gradients of `vars`, in order; `None` where a variable did not reach the loss.
fn take_grads(grads: &mut Gradients, vars: &[Var<'_>]) -> Vec<Option<Vec<f64>>> {
    vars.iter().map(|v| grads.take(*v)).collect()
}

fn finite(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss(step))
    }
}
