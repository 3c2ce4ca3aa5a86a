use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::pretrain::argmax;
use super::stream::{sample_batch, sample_indices, stream};
use super::{finite, lr_at, take_grads};
use crate::data::Batch;
use crate::tensor::soft_cross_entropy;
use crate::transformer::{truncated_normal, BoundModel, TransformerModel, INIT_STD};
use crate::{Error, Graph, Result, Tensor, Var};

/// Labelled sequences split into finetuning and held-out parts.
#[derive(Debug, Clone)]
pub struct ProbeTask {
    pub train: Vec<Vec<usize>>,
    pub train_labels: Vec<usize>,
    pub test: Vec<Vec<usize>>,
    pub test_labels: Vec<usize>,
    pub num_classes: usize,
}

impl ProbeTask {
    pub fn validate(&self) -> Result<()> {
        if self.train.len() != self.train_labels.len() || self.test.len() != self.test_labels.len() {
            return Err(Error::Data("probe sequences and labels differ in count".into()));
        }
        if self.test.is_empty() || self.num_classes < 2 {
            return Err(Error::Data("probe task needs test data and at least two classes".into()));
        }
        if let Some(l) = self.train_labels.iter().chain(&self.test_labels).find(|&&l| l >= self.num_classes) {
            return Err(Error::Data(format!("probe label {l} outside {} classes", self.num_classes)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Train only the classification head; first-position features are
    /// computed once.
    #[serde(default = "default_freeze")]
    pub freeze_encoder: bool,
}

fn default_freeze() -> bool {
    true
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-2,
            warmup_fraction: 0.1,
            total_steps: 800,
            batch_size: 32,
            seed: 0,
            optimizer: AdamWConfig::default(),
            freeze_encoder: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub accuracy: f64,
    pub losses: Vec<f64>,
}

/// Class logits from the first-position hidden state.
fn classify<'g>(bound: &BoundModel<'g>, batch: &Batch, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let h = bound.encode(&batch.input()?)?;
    let d = *h.shape().last().expect("rank 3");
    let first: Vec<usize> = (0..batch.batch).map(|i| i * batch.seq_len).collect();
    Ok(h.reshape(&[batch.batch * batch.seq_len, d])?.gather_rows(&first)?.matmul(w)?.add_bias(b)?)
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = vec![0.0; labels.len() * classes];
    labels.iter().enumerate().for_each(|(i, &l)| t[i * classes + l] = 1.0);
    Tensor::new(vec![labels.len(), classes], t).expect("consistent shape")
}

/// Finetunes a copy of `model` plus a linear head; returns held-out accuracy.
pub fn probe_finetune(model: &TransformerModel, task: &ProbeTask, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    task.validate()?;
    if cfg.total_steps == 0 || cfg.batch_size == 0 || !(cfg.peak_lr > 0.0) {
        return Err(Error::InvalidTrainConfig(format!("invalid probe config {cfg:?}")));
    }
    let (d, c) = (model.config().hidden_size, task.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = vec![
        Tensor::new(vec![d, c], truncated_normal(&mut rng, d * c, INIT_STD))?.with_grad(),
        Tensor::zeros(&[c]).with_grad(),
    ];
    if cfg.freeze_encoder {
        probe_frozen(model, task, cfg, head)
    } else {
        probe_full(model, task, cfg, head)
    }
}

fn probe_frozen(
    model: &TransformerModel,
    task: &ProbeTask,
    cfg: &ProbeConfig,
    mut head: Vec<Tensor>,
) -> Result<ProbeOutcome> {
    let c = task.num_classes;
    let train = first_position_features(model, &task.train)?;
    let mut opt = AdamW::new(cfg.optimizer, head.iter());
    let mut losses = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let picks = sample_indices(task.train.len(), cfg.batch_size, cfg.seed, step)?;
        let (value, grads) = {
            let g = Graph::new();
            let (w, b) = (g.leaf(&head[0]), g.leaf(&head[1]));
            let x = g.constant(&train).gather_rows(&picks)?;
            let labels: Vec<usize> = picks.iter().map(|&i| task.train_labels[i]).collect();
            let loss = soft_cross_entropy(g.constant(&one_hot(&labels, c)), x.matmul(w)?.add_bias(b)?)?;
            (finite(loss.item(), step)?, take_grads(&mut g.backward(loss)?, &[w, b]))
        };
        let lr = lr_at(step, cfg.peak_lr, cfg.warmup_fraction, cfg.total_steps);
        opt.step(&mut head.iter_mut().collect::<Vec<_>>(), &grads, lr)?;
        losses.push(value);
    }
    let accuracy = evaluate_probe(model, &head[0], &head[1], &task.test, &task.test_labels)?;
    Ok(ProbeOutcome { accuracy, losses })
}

fn probe_full(
    model: &TransformerModel,
    task: &ProbeTask,
    cfg: &ProbeConfig,
    mut head: Vec<Tensor>,
) -> Result<ProbeOutcome> {
    let c = task.num_classes;
    let mut encoder = model.clone();
    encoder.set_trainable(true);
    let mut opt = AdamW::new(cfg.optimizer, encoder.parameters().iter().chain(&head));
    let max_len = encoder.config().max_seq_len;
    let make = |step| {
        let (batch, picks) = sample_batch(&task.train, cfg.batch_size, max_len, cfg.seed, step)?;
        batch.with_probe_labels(picks.iter().map(|&i| task.train_labels[i]).collect())
    };
    let mut losses = Vec::with_capacity(cfg.total_steps);
    stream(cfg.total_steps, make, |step, batch| {
        let (value, grads) = {
            let g = Graph::new();
            let bound = encoder.bind(&g);
            let (w, b) = (g.leaf(&head[0]), g.leaf(&head[1]));
            let logits = classify(&bound, &batch, w, b)?;
            let target = g.constant(&one_hot(batch.probe_labels.as_deref().expect("labelled"), c));
            let loss = soft_cross_entropy(target, logits)?;
            let value = finite(loss.item(), step)?;
            let vars: Vec<Var<'_>> = bound.vars().iter().copied().chain([w, b]).collect();
            (value, take_grads(&mut g.backward(loss)?, &vars))
        };
        let lr = lr_at(step, cfg.peak_lr, cfg.warmup_fraction, cfg.total_steps);
        let mut params: Vec<&mut Tensor> = encoder.parameters_mut().iter_mut().chain(head.iter_mut()).collect();
        opt.step(&mut params, &grads, lr)?;
        losses.push(value);
        Ok(())
    })?;
    let accuracy = evaluate_probe(&encoder, &head[0], &head[1], &task.test, &task.test_labels)?;
    Ok(ProbeOutcome { accuracy, losses })
}

/// First-position final hidden states, `[n, d]`.
pub fn first_position_features(model: &TransformerModel, seqs: &[Vec<usize>]) -> Result<Tensor> {
    let max_len = model.config().max_seq_len;
    let mut data = Vec::with_capacity(seqs.len() * model.config().hidden_size);
    for chunk in seqs.chunks(64) {
        let views: Vec<&[usize]> = chunk.iter().map(|s| &s[..s.len().min(max_len)]).collect();
        let batch = Batch::from_sequences(&views, max_len)?;
        let g = Graph::new();
        let h = model.bind_frozen(&g).encode(&batch.input()?)?.value();
        let d = h.shape()[2];
        for i in 0..batch.batch {
            let row = i * batch.seq_len * d;
            data.extend_from_slice(&h.data()[row..row + d]);
        }
    }
    Ok(Tensor::new(vec![seqs.len(), model.config().hidden_size], data)?)
}

/// Accuracy of `argmax(h_first · w + b)` over labelled sequences.
pub fn evaluate_probe(
    model: &TransformerModel,
    w: &Tensor,
    b: &Tensor,
    seqs: &[Vec<usize>],
    labels: &[usize],
) -> Result<f64> {
    if seqs.len() != labels.len() || seqs.is_empty() {
        return Err(Error::Data("probe evaluation needs matching, non-empty sequences and labels".into()));
    }
    let logits = first_position_features(model, seqs)?.matmul(w)?;
    let c = logits.cols();
    let correct = labels
        .iter()
        .zip(logits.data().chunks_exact(c))
        .filter(|&(&l, row)| {
            let scores: Vec<f64> = row.iter().zip(b.data()).map(|(x, b)| x + b).collect();
            argmax(&scores) == l
        })
        .count();
    Ok(correct as f64 / seqs.len() as f64)
}
