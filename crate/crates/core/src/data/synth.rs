//! Synthetic multi-"language" corpus with gender agreement and a probe label.
//!
//! Each language has gendered nouns, adjectives that agree with their noun
//! and verbs that agree with the clause subject, separated by a variable
//! number of fillers. A sequence is three clauses from one language; noun
//! genders lean towards a per-sequence topic gender.
//!
//! Every sequence opens with a marker token agreeing with the majority gender
//! of its nouns, so the first position carries a sentence-level agreement.
//! The probe label is that majority gender; probe inputs hide the marker
//! behind `[MASK]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, MASK, SEP};
use crate::{Error, Result};

pub const NOUNS_PER_GENDER: usize = 17;
pub const ADJECTIVES_PER_GENDER: usize = 6;
pub const VERBS_PER_GENDER: usize = 10;
pub const DETERMINERS: usize = 4;
pub const FILLERS: usize = 10;
pub const CLAUSES: usize = 3;
pub const PUNCTUATION: [&str; 2] = [".", ","];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub languages: usize,
    /// Probability that a noun takes the topic gender.
    pub topic_bias: f64,
    /// Probability of an adjective before each noun.
    pub adjective_prob: f64,
    /// Maximum fillers between a noun and its verb.
    pub max_gap: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { languages: 3, topic_bias: 0.7, adjective_prob: 0.5, max_gap: 2 }
    }
}

fn noun(l: usize, g: usize, k: usize) -> String {
    format!("l{l}.n{g}.{k}")
}

fn adjective(l: usize, g: usize, k: usize) -> String {
    format!("l{l}.a{g}.{k}")
}

fn verb(l: usize, g: usize, k: usize) -> String {
    format!("l{l}.v{g}.{k}")
}

fn marker(l: usize, g: usize) -> String {
    format!("l{l}.m{g}")
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.topic_bias, self.adjective_prob];
        if self.languages == 0 || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data(format!("invalid synthetic corpus config {self:?}")));
        }
        Ok(())
    }

    /// Every token the generator can emit.
    pub fn inventory(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.languages {
            for g in 0..2 {
                out.extend((0..NOUNS_PER_GENDER).map(|k| noun(l, g, k)));
                out.extend((0..ADJECTIVES_PER_GENDER).map(|k| adjective(l, g, k)));
                out.extend((0..VERBS_PER_GENDER).map(|k| verb(l, g, k)));
            }
            out.extend((0..DETERMINERS).map(|k| format!("l{l}.d.{k}")));
            out.extend((0..FILLERS).map(|k| format!("l{l}.f.{k}")));
            out.push(format!("l{l}.and"));
            out.extend((0..2).map(|g| marker(l, g)));
        }
        out.extend(PUNCTUATION.iter().map(|s| s.to_string()));
        out
    }

    /// Vocabulary covering the inventory (256 entries for the default config).
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(self.inventory())
    }

    fn sequence(&self, rng: &mut ChaCha8Rng) -> String {
        let l = rng.random_range(0..self.languages);
        let topic = rng.random_range(0..2);
        let mut toks: Vec<String> = vec![String::new()];
        let mut genders = [0usize; 2];
        for c in 0..CLAUSES {
            if c > 0 {
                if rng.random_bool(0.5) {
                    toks.push(",".into());
                }
                toks.push(format!("l{l}.and"));
            }
            let g = if rng.random_bool(self.topic_bias) { topic } else { 1 - topic };
            genders[g] += 1;
            toks.push(format!("l{l}.d.{}", rng.random_range(0..DETERMINERS)));
            if rng.random_bool(self.adjective_prob) {
                toks.push(adjective(l, g, rng.random_range(0..ADJECTIVES_PER_GENDER)));
            }
            toks.push(noun(l, g, rng.random_range(0..NOUNS_PER_GENDER)));
            for _ in 0..rng.random_range(0..=self.max_gap) {
                toks.push(format!("l{l}.f.{}", rng.random_range(0..FILLERS)));
            }
            toks.push(verb(l, g, rng.random_range(0..VERBS_PER_GENDER)));
            if rng.random_bool(0.3) {
                toks.push(format!("l{l}.f.{}", rng.random_range(0..FILLERS)));
            }
        }
        toks.push(".".into());
        toks[0] = marker(l, usize::from(genders[1] > genders[0]));
        toks.join(" ")
    }
}

/// Generated lines with their probe labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub lines: Vec<String>,
    pub labels: Vec<usize>,
}

impl SynthCorpus {
    /// `line [SEP]`; the marker occupies the first position.
    pub fn encode(&self, vocab: &Vocab) -> Vec<Vec<usize>> {
        self.lines.iter().map(|l| encode_line(vocab, l)).collect()
    }

    /// [`SynthCorpus::encode`] with the marker replaced by `[MASK]`.
    pub fn probe_inputs(&self, vocab: &Vocab) -> Vec<Vec<usize>> {
        let mut seqs = self.encode(vocab);
        seqs.iter_mut().for_each(|s| s[0] = MASK);
        seqs
    }
}

pub fn encode_line(vocab: &Vocab, line: &str) -> Vec<usize> {
    let mut ids = vocab.encode(line);
    ids.push(SEP);
    ids
}

pub fn synth_corpus(num_seqs: usize, seed: u64, cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines: Vec<String> = (0..num_seqs).map(|_| cfg.sequence(&mut rng)).collect();
    let labels = lines
        .iter()
        .map(|l| probe_label(l).ok_or_else(|| Error::Data(format!("unlabelable line {l:?}"))))
        .collect::<Result<_>>()?;
    Ok(SynthCorpus { lines, labels })
}

/// Majority gender of the nouns in a line; `None` without nouns or on a tie.
pub fn probe_label(line: &str) -> Option<usize> {
    let mut counts = [0usize; 2];
    for tok in line.split_whitespace() {
        match tok.split('.').nth(1) {
            Some("n0") => counts[0] += 1,
            Some("n1") => counts[1] += 1,
            _ => {}
        }
    }
    match counts[0].cmp(&counts[1]) {
        std::cmp::Ordering::Greater => Some(0),
        std::cmp::Ordering::Less => Some(1),
        std::cmp::Ordering::Equal => None,
    }
}
