use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::{Error, Result, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Slot of a tensor inside one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum LayerParam {
    QueryWeight,
    QueryBias,
    KeyWeight,
    KeyBias,
    ValueWeight,
    ValueBias,
    AttnOutWeight,
    AttnOutBias,
    AttnNormGain,
    AttnNormBias,
    FfInWeight,
    FfInBias,
    FfOutWeight,
    FfOutBias,
    FfNormGain,
    FfNormBias,
}

pub(crate) const PER_LAYER: usize = 16;
pub(crate) const TOKEN_EMBEDDING: usize = 0;
pub(crate) const POSITION_EMBEDDING: usize = 1;
pub(crate) const EMBED_NORM_GAIN: usize = 2;
pub(crate) const EMBED_NORM_BIAS: usize = 3;
pub(crate) const FIRST_LAYER: usize = 4;

const LAYER_NAMES: [&str; PER_LAYER] = [
    "attn.query.weight",
    "attn.query.bias",
    "attn.key.weight",
    "attn.key.bias",
    "attn.value.weight",
    "attn.value.bias",
    "attn.output.weight",
    "attn.output.bias",
    "attn.norm.gain",
    "attn.norm.bias",
    "ffn.inner.weight",
    "ffn.inner.bias",
    "ffn.outer.weight",
    "ffn.outer.bias",
    "ffn.norm.gain",
    "ffn.norm.bias",
];

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Shapes and initializers of every parameter, in canonical order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (cfg.hidden_size, cfg.ff_size);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![cfg.vocab_size, d], Init::Normal),
        ("embeddings.position".to_string(), vec![cfg.max_seq_len, d], Init::Normal),
        ("embeddings.norm.gain".to_string(), vec![d], Init::Ones),
        ("embeddings.norm.bias".to_string(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.num_layers {
        let shapes: [(Vec<usize>, Init); PER_LAYER] = [
            (vec![d, d], Init::Normal),
            (vec![d], Init::Zeros),
            (vec![d, d], Init::Normal),
            (vec![d], Init::Zeros),
            (vec![d, d], Init::Normal),
            (vec![d], Init::Zeros),
            (vec![d, d], Init::Normal),
            (vec![d], Init::Zeros),
            (vec![d], Init::Ones),
            (vec![d], Init::Zeros),
            (vec![d, f], Init::Normal),
            (vec![f], Init::Zeros),
            (vec![f, d], Init::Normal),
            (vec![d], Init::Zeros),
            (vec![d], Init::Ones),
            (vec![d], Init::Zeros),
        ];
        for (name, (shape, init)) in LAYER_NAMES.iter().zip(shapes) {
            out.push((format!("layers.{}.{name}", l + 1), shape, init));
        }
    }
    out.push(("head.weight".to_string(), vec![d, cfg.vocab_size], Init::Normal));
    out
}

/// Samples N(0, std²) truncated to two standard deviations.
pub fn truncated_normal(rng: &mut impl Rng, len: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            out.push(v);
        }
    }
    out
}

/// Parameter bank of an encoder with an untied linear output head.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl TransformerModel {
    /// Deterministic initialization: truncated normal (std 0.02) weights,
    /// zero biases, unit layernorm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut names = Vec::new();
        for (name, shape, init) in layout(config) {
            let len = shape.iter().product();
            let data = match init {
                Init::Normal => truncated_normal(&mut rng, len, INIT_STD),
                Init::Zeros => vec![0.0; len],
                Init::Ones => vec![1.0; len],
            };
            params.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self { config: config.clone(), params, names })
    }

    /// Rebuilds a model from tensors in canonical order, checking every shape.
    pub fn from_parameters(config: &ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = layout(config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, got {}", expected.len(), params.len())));
        }
        for ((name, shape, _), t) in expected.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name}: expected shape {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(Self { config: config.clone(), names: expected.into_iter().map(|(n, _, _)| n).collect(), params })
    }

    /// Student whose layer `i` copies teacher layer `picked_layers[i]` (1-based);
    /// embeddings and output head are copied too.
    ///
    /// Only defined when every student layer has the teacher's layer shape.
    pub fn init_from_teacher_layers(
        student: &ModelConfig,
        teacher: &TransformerModel,
        picked_layers: &[usize],
    ) -> Result<Self> {
        student.validate()?;
        let tcfg = teacher.config();
        if !student.same_layer_shape(tcfg)
            || student.vocab_size != tcfg.vocab_size
            || student.max_seq_len != tcfg.max_seq_len
        {
            return Err(Error::ArchitectureMismatch(format!(
                "layer initialization from the teacher requires identical layer shapes \
                 (student A_h={}, d_h={}, d_f={}, |V|={}, max_len={} vs teacher A_h={}, d_h={}, d_f={}, |V|={}, max_len={})",
                student.num_heads,
                student.hidden_size,
                student.ff_size,
                student.vocab_size,
                student.max_seq_len,
                tcfg.num_heads,
                tcfg.hidden_size,
                tcfg.ff_size,
                tcfg.vocab_size,
                tcfg.max_seq_len
            )));
        }
        if picked_layers.len() != student.num_layers {
            return Err(Error::ArchitectureMismatch(format!(
                "{} picked layers for a {}-layer student",
                picked_layers.len(),
                student.num_layers
            )));
        }
        if let Some(&bad) = picked_layers.iter().find(|&&l| l == 0 || l > tcfg.num_layers) {
            return Err(Error::ArchitectureMismatch(format!("teacher layer {bad} outside [1, {}]", tcfg.num_layers)));
        }
        let mut params: Vec<Tensor> = teacher.params[..FIRST_LAYER].iter().map(Tensor::detached).collect();
        for &l in picked_layers {
            params.extend(teacher.layer(l).iter().map(Tensor::detached));
        }
        params.push(teacher.head().detached());
        Self::from_parameters(student, params)
    }

    /// Canonical parameter names of an architecture.
    pub fn names_for(config: &ModelConfig) -> Vec<String> {
        layout(config).into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// The sixteen tensors of 1-based layer `l`, in [`LayerParam`] order.
    pub fn layer(&self, l: usize) -> &[Tensor] {
        assert!(l >= 1 && l <= self.config.num_layers, "layer {l} out of range");
        let start = FIRST_LAYER + (l - 1) * PER_LAYER;
        &self.params[start..start + PER_LAYER]
    }

    pub fn layer_param(&self, l: usize, which: LayerParam) -> &Tensor {
        &self.layer(l)[which as usize]
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.params[TOKEN_EMBEDDING]
    }

    pub fn position_embedding_mut(&mut self) -> &mut Tensor {
        &mut self.params[POSITION_EMBEDDING]
    }

    pub fn head(&self) -> &Tensor {
        self.params.last().expect("head present")
    }

    /// Toggles gradient tracking on every parameter.
    pub fn set_trainable(&mut self, on: bool) {
        self.params.iter_mut().for_each(|p| p.set_requires_grad(on));
    }

    /// Bitwise equality of all parameters.
    pub fn bit_eq(&self, other: &TransformerModel) -> bool {
        self.config == other.config && self.params.iter().zip(&other.params).all(|(a, b)| a.bit_eq(b))
    }
}
