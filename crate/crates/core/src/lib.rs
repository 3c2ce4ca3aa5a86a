//! Desk-scale workbench for task-agnostic distillation of Transformer encoders.
//!
//! * [`tensor`]: `f64` tensors with a reverse-mode tape.
//! * [`transformer`]: post-layernorm encoder exposing hidden states, per-head
//!   Q/K/V and logits, plus the binary checkpoint container.
//! * [`objectives`]: layer-mapping strategies and the distillation losses
//!   (output distribution, hidden state, cosine hidden state, MiniLMv2,
//!   DirectMiniLM and the Gram-matrix MSE).
//! * [`training`]: AdamW, the warmup/decay schedule, MLM teacher pretraining,
//!   single- and multi-stage distillation and probe finetuning.
//! * [`data`]: whitespace vocabulary, MLM masking and the synthetic corpus.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod objectives;
pub mod tensor;
pub mod training;
pub mod transformer;

use std::path::PathBuf;

pub use tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("invalid layer mapping: {0}")]
    InvalidMapping(String),
    #[error("invalid distillation spec: {0}")]
    InvalidSpec(String),
    #[error("missing projection {0}")]
    MissingProjection(String),
    #[error("no supervised positions")]
    EmptyMask,
    #[error("trace mismatch: {0}")]
    TraceMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("corpus has {have} sequences, fewer than one batch of {need}")]
    CorpusTooSmall { have: usize, need: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
