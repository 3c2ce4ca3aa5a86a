use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{MASK, NUM_RESERVED, PAD};
use crate::transformer::EncoderInput;
use crate::{Error, Result};

/// Label value at unsupervised positions.
pub const IGNORE: i64 = -1;

/// Padded token batch with MLM labels and optional sequence labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    /// `true` over real tokens, `false` over padding.
    pub attention_mask: Vec<bool>,
    /// Original id at corrupted positions, [`IGNORE`] elsewhere.
    pub labels: Vec<i64>,
    pub probe_labels: Option<Vec<usize>>,
}

impl Batch {
    /// Pads to the longest sequence; errors beyond `max_seq_len`.
    pub fn from_sequences(seqs: &[&[usize]], max_seq_len: usize) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Data("batches need at least one non-empty sequence".into()));
        }
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if seq_len > max_seq_len {
            return Err(Error::SequenceTooLong { len: seq_len, max: max_seq_len });
        }
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
        let mut attention_mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat_n(PAD, seq_len - s.len()));
            attention_mask.extend((0..seq_len).map(|p| p < s.len()));
        }
        Ok(Self {
            labels: vec![IGNORE; tokens.len()],
            tokens,
            batch: seqs.len(),
            seq_len,
            attention_mask,
            probe_labels: None,
        })
    }

    pub fn with_probe_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.batch {
            return Err(Error::Data(format!("{} probe labels for {} sequences", labels.len(), self.batch)));
        }
        self.probe_labels = Some(labels);
        Ok(self)
    }

    pub fn input(&self) -> Result<EncoderInput> {
        EncoderInput::new(self.tokens.clone(), self.batch, self.seq_len, Some(self.attention_mask.clone()))
    }

    /// Flattened indices of supervised (corrupted) positions.
    pub fn supervised_rows(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l != IGNORE).map(|(i, _)| i).collect()
    }
}

/// BERT-style corruption settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub mask_prob: f64,
    /// Apply the 80/10/10 mask/random/keep split; otherwise always `[MASK]`.
    pub split: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { mask_prob: 0.15, split: true }
    }
}

/// Corrupts each non-special, non-padding position with probability `mask_prob`.
pub fn mask_batch(batch: &Batch, cfg: MaskConfig, vocab_size: usize, seed: u64) -> Result<Batch> {
    if !(0.0..=1.0).contains(&cfg.mask_prob) {
        return Err(Error::Data(format!("mask_prob {} outside [0, 1]", cfg.mask_prob)));
    }
    if vocab_size <= NUM_RESERVED {
        return Err(Error::Data("vocabulary has no ordinary tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    out.labels = vec![IGNORE; batch.tokens.len()];
    for (p, &tok) in batch.tokens.iter().enumerate() {
        if !batch.attention_mask[p] || tok < NUM_RESERVED || !rng.random_bool(cfg.mask_prob) {
            continue;
        }
        out.labels[p] = tok as i64;
        out.tokens[p] = if !cfg.split {
            MASK
        } else {
            let r: f64 = rng.random();
            if r < 0.8 {
                MASK
            } else if r < 0.9 {
                rng.random_range(NUM_RESERVED..vocab_size)
            } else {
                tok
            }
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::{CLS, SEP};

    fn batch() -> Batch {
        Batch::from_sequences(&[&[CLS, 7, 8, 9, SEP], &[CLS, 10, SEP]], 16).unwrap()
    }

    #[test]
    fn padding_to_longest() {
        let b = batch();
        assert_eq!(b.seq_len, 5);
        assert_eq!(b.tokens[5..], [CLS, 10, SEP, PAD, PAD]);
        assert_eq!(b.attention_mask[5..], [true, true, true, false, false]);
        assert!(Batch::from_sequences(&[&[1; 9]], 8).is_err());
    }

    #[test]
    fn zero_and_full_masking() {
        let none = mask_batch(&batch(), MaskConfig { mask_prob: 0.0, split: true }, 20, 1).unwrap();
        assert!(none.labels.iter().all(|&l| l == IGNORE));
        let all = mask_batch(&batch(), MaskConfig { mask_prob: 1.0, split: false }, 20, 1).unwrap();
        let expect = [-1, 7, 8, 9, -1, -1, 10, -1, -1, -1];
        assert_eq!(all.labels, expect);
        assert!(all.supervised_rows().iter().all(|&p| all.tokens[p] == MASK));
    }

    #[test]
    fn corruption_rate_monte_carlo() {
        let seq: Vec<usize> = (0..1000).map(|i| NUM_RESERVED + i % 50).collect();
        let seqs: Vec<&[usize]> = (0..100).map(|_| seq.as_slice()).collect();
        let b = Batch::from_sequences(&seqs, 1000).unwrap();
        let m = mask_batch(&b, MaskConfig::default(), 64, 9).unwrap();
        let rate = m.supervised_rows().len() as f64 / 1e5;
        assert!((rate - 0.15).abs() < 0.01, "rate {rate}");
        let masked = m.supervised_rows().iter().filter(|&&p| m.tokens[p] == MASK).count() as f64;
        assert!((masked / (rate * 1e5) - 0.8).abs() < 0.02);
    }
}
