use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-12;

fn default_eps() -> f64 {
    DEFAULT_LAYER_NORM_EPS
}

/// Architectural tuple of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ff_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Dropout on embedding, attention-output and feed-forward outputs; 0 disables.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        hidden_size: usize,
        ff_size: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        let cfg = Self {
            num_layers,
            num_heads,
            hidden_size,
            ff_size,
            vocab_size,
            max_seq_len,
            dropout: 0.0,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_size", self.hidden_size),
            ("ff_size", self.ff_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::InvalidConfig("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Attention head width d_k = d_h / A_h.
    pub fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Parameters of one encoder layer (attention, two layernorms, feed-forward).
    pub fn layer_parameter_count(&self) -> usize {
        let (d, f) = (self.hidden_size, self.ff_size);
        4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    }

    /// Embeddings plus encoder layers, without the output head.
    ///
    /// This is the quantity listed for the reference architectures, whose
    /// output head is tied to the token embedding.
    pub fn encoder_parameter_count(&self) -> usize {
        let d = self.hidden_size;
        self.vocab_size * d + self.max_seq_len * d + 2 * d + self.num_layers * self.layer_parameter_count()
    }

    /// Everything this implementation trains, including the untied head W_O.
    pub fn parameter_count(&self) -> usize {
        self.encoder_parameter_count() + self.hidden_size * self.vocab_size
    }

    /// Whether two configs agree on every per-layer shape.
    pub fn same_layer_shape(&self, other: &ModelConfig) -> bool {
        self.hidden_size == other.hidden_size && self.ff_size == other.ff_size && self.num_heads == other.num_heads
    }
}

/// Vocabulary of the monolingual reference teacher.
pub const REFERENCE_VOCAB: usize = 30522;
pub const REFERENCE_MAX_SEQ_LEN: usize = 512;
pub const DESK_VOCAB: usize = 256;
pub const DESK_MAX_SEQ_LEN: usize = 64;

/// Named architectures: the reference sizes and their desk-scale analogues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "teacher")]
    Teacher,
    #[serde(rename = "6l-distilbert")]
    SixLayerDistilBert,
    #[serde(rename = "6l")]
    SixLayer,
    #[serde(rename = "4l")]
    FourLayer,
    #[serde(rename = "3l")]
    ThreeLayer,
    #[serde(rename = "desk-teacher")]
    DeskTeacher,
    #[serde(rename = "desk-6l-distilbert")]
    DeskSixLayerDistilBert,
    #[serde(rename = "desk-6l")]
    DeskSixLayer,
    #[serde(rename = "desk-4l")]
    DeskFourLayer,
    #[serde(rename = "desk-3l")]
    DeskThreeLayer,
}

impl Preset {
    pub const REFERENCE: [Preset; 5] =
        [Preset::ThreeLayer, Preset::FourLayer, Preset::SixLayer, Preset::SixLayerDistilBert, Preset::Teacher];
    pub const DESK: [Preset; 5] = [
        Preset::DeskThreeLayer,
        Preset::DeskFourLayer,
        Preset::DeskSixLayer,
        Preset::DeskSixLayerDistilBert,
        Preset::DeskTeacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Teacher => "teacher",
            Preset::SixLayerDistilBert => "6l-distilbert",
            Preset::SixLayer => "6l",
            Preset::FourLayer => "4l",
            Preset::ThreeLayer => "3l",
            Preset::DeskTeacher => "desk-teacher",
            Preset::DeskSixLayerDistilBert => "desk-6l-distilbert",
            Preset::DeskSixLayer => "desk-6l",
            Preset::DeskFourLayer => "desk-4l",
            Preset::DeskThreeLayer => "desk-3l",
        }
    }

    /// `(L, A_h, d_h, d_f)`.
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            Preset::Teacher => (12, 12, 768, 3072),
            Preset::SixLayerDistilBert => (6, 12, 768, 3072),
            Preset::SixLayer => (6, 12, 384, 1536),
            Preset::FourLayer => (4, 12, 576, 768),
            Preset::ThreeLayer => (3, 12, 384, 1024),
            // Layers scaled by 1/3 (rounded down, at least one), d_h by 1/12,
            // d_f by 1/24 (rounded).
            Preset::DeskTeacher => (4, 4, 64, 128),
            Preset::DeskSixLayerDistilBert => (2, 4, 64, 128),
            Preset::DeskSixLayer => (2, 4, 32, 64),
            Preset::DeskFourLayer => (1, 4, 48, 32),
            Preset::DeskThreeLayer => (1, 4, 32, 43),
        }
    }

    pub fn is_desk(self) -> bool {
        Preset::DESK.contains(&self)
    }

    pub fn config(self) -> ModelConfig {
        let (l, a, d, f) = self.dims();
        let (vocab, max_len) =
            if self.is_desk() { (DESK_VOCAB, DESK_MAX_SEQ_LEN) } else { (REFERENCE_VOCAB, REFERENCE_MAX_SEQ_LEN) };
        ModelConfig::new(l, a, d, f, vocab, max_len).expect("preset dimensions are valid")
    }

    /// Desk-scale counterpart of a reference preset (identity for desk presets).
    pub fn desk(self) -> Preset {
        match self {
            Preset::Teacher => Preset::DeskTeacher,
            Preset::SixLayerDistilBert => Preset::DeskSixLayerDistilBert,
            Preset::SixLayer => Preset::DeskSixLayer,
            Preset::FourLayer => Preset::DeskFourLayer,
            Preset::ThreeLayer => Preset::DeskThreeLayer,
            desk => desk,
        }
    }

    pub fn all() -> impl Iterator<Item = Preset> {
        Preset::REFERENCE.into_iter().chain(Preset::DESK)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::all().find(|p| p.name() == s).ok_or_else(|| Error::InvalidConfig(format!("unknown preset {s:?}")))
    }
}
