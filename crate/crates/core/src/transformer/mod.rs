//! Post-layernorm Transformer encoder.

pub mod checkpoint;
mod config;
mod forward;
mod model;

pub use config::{
    ModelConfig, Preset, DEFAULT_LAYER_NORM_EPS, DESK_MAX_SEQ_LEN, DESK_VOCAB, REFERENCE_MAX_SEQ_LEN, REFERENCE_VOCAB,
};
pub use forward::{AttentionTrace, BoundModel, EncoderInput, ForwardTrace, HeadTrace, Qkv, MASKED_SCORE};
pub use model::{truncated_normal, LayerParam, TransformerModel, INIT_STD};
