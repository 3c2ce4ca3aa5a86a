use super::manifest::{LossRecord, RunManifest, StageRecord};
use super::stream::{mlm_batch, step_rng, stream};
use super::{finite, take_grads, Stage, TrainConfig, Updater, DROPOUT_STREAM};
use crate::data::MaskConfig;
use crate::objectives::{DistillSpec, Method, Objective, OdPositions, ProjectionBank};
use crate::transformer::checkpoint::checkpoint_id;
use crate::transformer::TransformerModel;
use crate::{Error, Graph, Result, Tensor};

/// Stream key of projection initialization.
const PROJECTION_SEED: u64 = 0x7072_6f6a;

pub struct DistillOutcome {
    pub student: TransformerModel,
    pub projections: ProjectionBank,
    pub manifest: RunManifest,
}

pub struct MultiStageOutcome {
    pub student: TransformerModel,
    /// Projections learned in the first stage; the output stage uses none.
    pub stage1_projections: ProjectionBank,
    pub manifest: RunManifest,
}

fn run_stage(
    teacher: &TransformerModel,
    mut student: TransformerModel,
    spec: &DistillSpec,
    cfg: &TrainConfig,
    corpus: &[Vec<usize>],
) -> Result<(TransformerModel, ProjectionBank, StageRecord)> {
    cfg.validate()?;
    let (scfg, tcfg) = (student.config().clone(), teacher.config().clone());
    if scfg.vocab_size != tcfg.vocab_size {
        return Err(Error::ArchitectureMismatch(format!(
            "student vocabulary {} differs from the teacher's {}",
            scfg.vocab_size, tcfg.vocab_size
        )));
    }
    let objective = Objective::new(spec, &scfg, &tcfg)?;
    let mut projections = ProjectionBank::for_spec(spec, &scfg, &tcfg, cfg.seed ^ PROJECTION_SEED)?;
    student.set_trainable(true);
    let initial = checkpoint_id(&student);
    let mut updater = Updater::new(cfg, student.parameters().iter().chain(projections.tensors()));
    let mask = MaskConfig { mask_prob: cfg.mask_prob, split: true };
    let seq_len = cfg.seq_len.min(scfg.max_seq_len).min(tcfg.max_seq_len);
    let make = |step| mlm_batch(corpus, cfg.batch_size, seq_len, mask, tcfg.vocab_size, cfg.seed, step);
    let stage = cfg.stage.name().to_string();
    let mut losses = Vec::with_capacity(cfg.total_steps);

    stream(cfg.total_steps, make, |step, batch| {
        let (value, grads) = {
            let g = Graph::new();
            let input = batch.input()?;
            let t = teacher.bind_frozen(&g);
            let s = student.bind(&g);
            let p = projections.bind(&g);
            let mut rng = step_rng(cfg.seed ^ DROPOUT_STREAM, step);
            let (t_trace, s_trace) = if objective.needs_logits() {
                (t.forward(&input)?, s.forward_train(&input, &mut rng)?)
            } else {
                (t.forward_hidden(&input)?, s.forward_hidden_train(&input, &mut rng)?)
            };
            let od_rows = match objective.od_positions {
                OdPositions::Masked => batch.supervised_rows(),
                OdPositions::All => input.valid_rows(),
            };
            let loss = objective.loss(&s_trace, &t_trace, &p, &od_rows)?;
            let value = finite(loss.item(), step)?;
            let vars: Vec<_> = s.vars().iter().copied().chain(p.vars()).collect();
            (value, take_grads(&mut g.backward(loss)?, &vars))
        };
        let mut params: Vec<&mut Tensor> =
            student.parameters_mut().iter_mut().chain(projections.tensors_mut()).collect();
        let lr = updater.apply(step, &mut params, grads)?;
        if spec.orthogonality_constraint {
            projections.orthonormalize()?;
        }
        losses.push(LossRecord { step, stage: stage.clone(), loss: value, lr });
        Ok(())
    })?;

    let record = StageRecord {
        name: stage,
        spec: Some(spec.clone()),
        train: cfg.clone(),
        initial_checkpoint: initial,
        final_checkpoint: checkpoint_id(&student),
        losses,
    };
    Ok((student, projections, record))
}

/// Trains `student` against the frozen `teacher` with the single objective in `spec`.
pub fn distill(
    teacher: &TransformerModel,
    student: TransformerModel,
    spec: &DistillSpec,
    cfg: &TrainConfig,
    corpus: &[Vec<usize>],
) -> Result<DistillOutcome> {
    if cfg.stage == Stage::TeacherPretrain {
        return Err(Error::InvalidTrainConfig("distillation cannot run a teacher-pretrain stage".into()));
    }
    let model = student.config().clone();
    let (student, projections, record) = run_stage(teacher, student, spec, cfg, corpus)?;
    let final_checkpoint = record.final_checkpoint.clone();
    Ok(DistillOutcome {
        student,
        projections,
        manifest: RunManifest {
            teacher_checkpoint: Some(checkpoint_id(teacher)),
            model,
            stages: vec![record],
            final_checkpoint,
        },
    })
}

/// Intermediate-layer transfer followed by output transfer from its result.
pub fn distill_multistage(
    teacher: &TransformerModel,
    student: TransformerModel,
    transfer: &DistillSpec,
    od: &DistillSpec,
    transfer_cfg: &TrainConfig,
    od_cfg: &TrainConfig,
    corpus: &[Vec<usize>],
) -> Result<MultiStageOutcome> {
    if transfer.method == Method::OutputDistribution {
        return Err(Error::InvalidSpec("the first stage must transfer intermediate layers".into()));
    }
    if od.method != Method::OutputDistribution {
        return Err(Error::InvalidSpec(format!("the second stage must be od, got {}", od.method)));
    }
    if transfer_cfg.stage != Stage::Distill || od_cfg.stage != Stage::OdAfterDistill {
        return Err(Error::InvalidTrainConfig("stages must be distill then od-after-distill".into()));
    }
    let model = student.config().clone();
    let (student, stage1_projections, first) = run_stage(teacher, student, transfer, transfer_cfg, corpus)?;
    let (student, _, second) = run_stage(teacher, student, od, od_cfg, corpus)?;
    let final_checkpoint = second.final_checkpoint.clone();
    Ok(MultiStageOutcome {
        student,
        stage1_projections,
        manifest: RunManifest {
            teacher_checkpoint: Some(checkpoint_id(teacher)),
            model,
            stages: vec![first, second],
            final_checkpoint,
        },
    })
}
