use super::manifest::{LossRecord, RunManifest, StageRecord};
use super::stream::{mlm_batch, step_rng, stream};
use super::{finite, take_grads, Stage, TrainConfig, Updater, DROPOUT_STREAM};
use crate::data::{mask_batch, Batch, MaskConfig};
use crate::tensor::soft_cross_entropy;
use crate::transformer::checkpoint::checkpoint_id;
use crate::transformer::{ModelConfig, TransformerModel};
use crate::{Error, Graph, Result, Tensor, Var};

/// Cross-entropy of the logits against the original ids at supervised positions.
pub fn mlm_loss<'g>(logits: Var<'g>, batch: &Batch) -> Result<Var<'g>> {
    let rows = batch.supervised_rows();
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    let v = *logits.shape().last().expect("rank >= 1");
    let mut target = vec![0.0; rows.len() * v];
    for (r, &p) in rows.iter().enumerate() {
        target[r * v + batch.labels[p] as usize] = 1.0;
    }
    let target = logits.graph().constant(&Tensor::new(vec![rows.len(), v], target)?);
    let picked = logits.reshape(&[batch.tokens.len(), v])?.gather_rows(&rows)?;
    Ok(soft_cross_entropy(target, picked)?)
}

pub struct PretrainOutcome {
    pub model: TransformerModel,
    pub manifest: RunManifest,
}

/// Masked-language-model training of a randomly initialized encoder
/// (initialized from `cfg.seed`).
pub fn pretrain_teacher(corpus: &[Vec<usize>], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::TeacherPretrain {
        return Err(Error::InvalidTrainConfig(format!("stage {} is not teacher-pretrain", cfg.stage.name())));
    }
    if corpus.len() < cfg.batch_size {
        return Err(Error::CorpusTooSmall { have: corpus.len(), need: cfg.batch_size });
    }
    let mut model = TransformerModel::init(model_cfg, cfg.seed)?;
    model.set_trainable(true);
    let initial = checkpoint_id(&model);
    let mask = MaskConfig { mask_prob: cfg.mask_prob, split: true };
    let vocab = model_cfg.vocab_size;
    let mut updater = Updater::new(cfg, model.parameters());
    let mut losses = Vec::with_capacity(cfg.total_steps);
    let make = |step| mlm_batch(corpus, cfg.batch_size, cfg.seq_len, mask, vocab, cfg.seed, step);
    stream(cfg.total_steps, make, |step, batch| {
        let (value, grads) = {
            let g = Graph::new();
            let bound = model.bind(&g);
            let mut rng = step_rng(cfg.seed ^ DROPOUT_STREAM, step);
            let trace = bound.forward_train(&batch.input()?, &mut rng)?;
            let loss = mlm_loss(trace.logits()?, &batch)?;
            let value = finite(loss.item(), step)?;
            (value, take_grads(&mut g.backward(loss)?, bound.vars()))
        };
        let mut params: Vec<&mut Tensor> = model.parameters_mut().iter_mut().collect();
        let lr = updater.apply(step, &mut params, grads)?;
        losses.push(LossRecord { step, stage: Stage::TeacherPretrain.name().into(), loss: value, lr });
        Ok(())
    })?;
    let final_id = checkpoint_id(&model);
    let manifest = RunManifest {
        teacher_checkpoint: None,
        model: model_cfg.clone(),
        stages: vec![StageRecord {
            name: Stage::TeacherPretrain.name().into(),
            spec: None,
            train: cfg.clone(),
            initial_checkpoint: initial,
            final_checkpoint: final_id.clone(),
            losses,
        }],
        final_checkpoint: final_id,
    };
    Ok(PretrainOutcome { model, manifest })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MlmEval {
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent original token.
    pub majority_baseline: f64,
    pub positions: usize,
}

/// Masked-token accuracy over `corpus` with deterministic masks.
pub fn mlm_accuracy(model: &TransformerModel, corpus: &[Vec<usize>], mask: MaskConfig, seed: u64) -> Result<MlmEval> {
    let cfg = model.config();
    let (mut correct, mut total) = (0usize, 0usize);
    let mut counts = vec![0usize; cfg.vocab_size];
    for (c, chunk) in corpus.chunks(64).enumerate() {
        let seqs: Vec<&[usize]> = chunk.iter().map(|s| &s[..s.len().min(cfg.max_seq_len)]).collect();
        let batch = mask_batch(&Batch::from_sequences(&seqs, cfg.max_seq_len)?, mask, cfg.vocab_size, seed + c as u64)?;
        let rows = batch.supervised_rows();
        if rows.is_empty() {
            continue;
        }
        let g = Graph::new();
        let logits = model.bind_frozen(&g).forward(&batch.input()?)?.logits()?.value();
        let v = cfg.vocab_size;
        for &p in &rows {
            let row = &logits.data()[p * v..(p + 1) * v];
            let pred = argmax(row);
            let label = batch.labels[p] as usize;
            counts[label] += 1;
            correct += usize::from(pred == label);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let majority = *counts.iter().max().expect("non-empty vocab");
    Ok(MlmEval {
        accuracy: correct as f64 / total as f64,
        majority_baseline: majority as f64 / total as f64,
        positions: total,
    })
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best }).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthConfig};

    fn tiny_run(steps: usize) -> (Vec<Vec<usize>>, ModelConfig, TrainConfig) {
        let synth = SynthConfig::default();
        let vocab = synth.vocab().unwrap();
        let corpus = synth_corpus(64, 1, &synth).unwrap().lines.iter().map(|l| vocab.encode_sequence(l)).collect();
        let model = ModelConfig::new(1, 2, 16, 32, vocab.len(), 64).unwrap();
        let cfg = TrainConfig { total_steps: steps, batch_size: 4, ..TrainConfig::desk(Stage::TeacherPretrain) };
        (corpus, model, cfg)
    }

    #[test]
    fn initial_loss_is_near_chance_and_runs_repeat() {
        let (corpus, model, cfg) = tiny_run(6);
        let a = pretrain_teacher(&corpus, &model, &cfg).unwrap();
        let first = a.manifest.stages[0].losses[0].loss;
        assert!((first - (256f64).ln()).abs() < 0.1, "{first}");
        let b = pretrain_teacher(&corpus, &model, &cfg).unwrap();
        assert!(a.model.bit_eq(&b.model));
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn corpus_smaller_than_batch() {
        let (corpus, model, cfg) = tiny_run(2);
        let r = pretrain_teacher(&corpus[..3], &model, &cfg);
        assert!(matches!(r, Err(Error::CorpusTooSmall { have: 3, need: 4 })));
    }

    #[test]
    fn mlm_loss_matches_direct_formula() {
        let g = Graph::new();
        let logits = Tensor::new(vec![1, 2, 3], vec![0.1, 0.5, -0.2, 1.0, 0.0, 2.0]).unwrap();
        let mut batch = Batch::from_sequences(&[&[5, 6]], 4).unwrap();
        batch.labels = vec![-1, 2];
        let loss = mlm_loss(g.constant(&logits), &batch).unwrap().item();
        let lse = (1f64.exp() + 1.0 + 2f64.exp()).ln();
        assert!((loss - (lse - 2.0)).abs() < 1e-12);
    }
}
