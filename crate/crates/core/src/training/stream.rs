use std::sync::mpsc::sync_channel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{mask_batch, Batch, MaskConfig, MASK, NUM_RESERVED};
use crate::{Error, Result};

/// Capacity of the hand-off queue between batch assembly and compute.
pub const QUEUE_DEPTH: usize = 2;

/// Per-step generator: stream `step` of a ChaCha stream keyed by `seed`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Uniformly sampled (with replacement) batch for `step`, truncated to `seq_len`.
/// Returns the batch and the sampled corpus indices.
/// `batch_size` indices into `0..n`, drawn with replacement from the step stream.
pub fn sample_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Result<Vec<usize>> {
    if n < batch_size {
        return Err(Error::CorpusTooSmall { have: n, need: batch_size });
    }
    let mut rng = step_rng(seed, step);
    Ok((0..batch_size).map(|_| rng.random_range(0..n)).collect())
}

pub fn sample_batch(
    corpus: &[Vec<usize>],
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    step: usize,
) -> Result<(Batch, Vec<usize>)> {
    let picks = sample_indices(corpus.len(), batch_size, seed, step)?;
    let seqs: Vec<&[usize]> = picks.iter().map(|&i| &corpus[i][..corpus[i].len().min(seq_len)]).collect();
    Ok((Batch::from_sequences(&seqs, seq_len)?, picks))
}

/// MLM-corrupted batch for `step`; at least one position is always supervised.
pub fn mlm_batch(
    corpus: &[Vec<usize>],
    batch_size: usize,
    seq_len: usize,
    mask: MaskConfig,
    vocab_size: usize,
    seed: u64,
    step: usize,
) -> Result<Batch> {
    let (batch, _) = sample_batch(corpus, batch_size, seq_len, seed, step)?;
    let mask_seed = step_rng(seed ^ 0x6d61_736b, step).random();
    let mut out = mask_batch(&batch, mask, vocab_size, mask_seed)?;
    if out.supervised_rows().is_empty() {
        if let Some(p) = (0..out.tokens.len()).find(|&p| out.attention_mask[p] && batch.tokens[p] >= NUM_RESERVED) {
            out.labels[p] = batch.tokens[p] as i64;
            out.tokens[p] = MASK;
        }
    }
    Ok(out)
}

/// Runs `consume` for steps `0..steps` while a helper thread assembles the
/// next batches through a bounded queue. Batches depend only on the step.
pub fn stream<M, C>(steps: usize, make: M, mut consume: C) -> Result<()>
where
    M: Fn(usize) -> Result<Batch> + Sync,
    C: FnMut(usize, Batch) -> Result<()>,
{
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel(QUEUE_DEPTH);
        let make = &make;
        scope.spawn(move || {
            for step in 0..steps {
                if tx.send(make(step)).is_err() {
                    break;
                }
            }
        });
        for step in 0..steps {
            let batch = rx.recv().expect("producer yields one batch per step")?;
            consume(step, batch)?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<Vec<usize>> {
        (0..20).map(|i| (0..3 + i % 5).map(|t| 5 + (i + t) % 11).collect()).collect()
    }

    #[test]
    fn batches_depend_on_step_only() {
        let c = corpus();
        let a = mlm_batch(&c, 4, 8, MaskConfig::default(), 16, 3, 7).unwrap();
        let b = mlm_batch(&c, 4, 8, MaskConfig::default(), 16, 3, 7).unwrap();
        assert_eq!(a, b);
        assert!(!a.supervised_rows().is_empty());
        let mut seen = Vec::new();
        stream(
            5,
            |s| mlm_batch(&c, 4, 8, MaskConfig::default(), 16, 3, s),
            |s, b| {
                assert_eq!(b, mlm_batch(&c, 4, 8, MaskConfig::default(), 16, 3, s).unwrap());
                seen.push(s);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(seen, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn errors_propagate_and_stop_the_producer() {
        let c = corpus();
        let r = stream(
            100,
            |s| Ok(sample_batch(&c, 2, 8, 0, s)?.0),
            |s, _| {
                if s == 3 {
                    Err(Error::NonFiniteLoss(s))
                } else {
                    Ok(())
                }
            },
        );
        assert!(matches!(r, Err(Error::NonFiniteLoss(3))));
        assert!(matches!(sample_batch(&c, 21, 8, 0, 0), Err(Error::CorpusTooSmall { have: 20, need: 21 })));
    }
}
