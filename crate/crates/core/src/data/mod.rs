//! Whitespace vocabulary, batching and MLM masking, the synthetic corpus and file formats.

mod batch;
pub mod io;
mod synth;
mod vocab;

pub use batch::{mask_batch, Batch, MaskConfig, IGNORE};
pub use synth::{encode_line, probe_label, synth_corpus, SynthConfig, SynthCorpus};
pub use vocab::{Vocab, CLS, MASK, NUM_RESERVED, PAD, RESERVED_TOKENS, SEP, UNK};
