use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{
    LayerParam, EMBED_NORM_BIAS, EMBED_NORM_GAIN, FIRST_LAYER, PER_LAYER, POSITION_EMBEDDING, TOKEN_EMBEDDING,
};
use super::{ModelConfig, TransformerModel};
use crate::tensor::{concat_last, embedding, split_last};
use crate::{Error, Graph, Result, Tensor, Var};

/// Additive score for masked (padding) keys.
pub const MASKED_SCORE: f64 = -1e9;

/// Query, key or value projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Qkv {
    #[serde(rename = "q")]
    Query,
    #[serde(rename = "k")]
    Key,
    #[serde(rename = "v")]
    Value,
}

impl Qkv {
    pub const ALL: [Qkv; 3] = [Qkv::Query, Qkv::Key, Qkv::Value];

    pub fn short(self) -> &'static str {
        match self {
            Qkv::Query => "q",
            Qkv::Key => "k",
            Qkv::Value => "v",
        }
    }
}

/// A batch of equal-length (padded) token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    tokens: Vec<usize>,
    batch: usize,
    seq_len: usize,
    mask: Vec<bool>,
}

impl EncoderInput {
    pub fn new(tokens: Vec<usize>, batch: usize, seq_len: usize, mask: Option<Vec<bool>>) -> Result<Self> {
        if batch == 0 || seq_len == 0 || tokens.len() != batch * seq_len {
            return Err(Error::Data(format!("{} tokens do not form a {batch}x{seq_len} batch", tokens.len())));
        }
        let mask = mask.unwrap_or_else(|| vec![true; tokens.len()]);
        if mask.len() != tokens.len() {
            return Err(Error::Data("attention mask length differs from token count".into()));
        }
        for row in mask.chunks(seq_len) {
            if !row[0] {
                return Err(Error::Data("every sequence needs at least its first position".into()));
            }
            if row.windows(2).any(|w| !w[0] && w[1]) {
                return Err(Error::Data("padding must be a suffix (left-aligned sequences)".into()));
            }
        }
        Ok(Self { tokens, batch, seq_len, mask })
    }

    pub fn single(tokens: &[usize]) -> Result<Self> {
        Self::new(tokens.to_vec(), 1, tokens.len(), None)
    }

    /// Left-aligns sequences and pads each to the longest with `pad_id`.
    pub fn padded(seqs: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
        let mut mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat_n(pad_id, seq_len - s.len()));
            mask.extend(std::iter::repeat_n(true, s.len()));
            mask.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        Self::new(tokens, seqs.len(), seq_len, Some(mask))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_padded(&self) -> bool {
        self.mask.iter().any(|m| !m)
    }

    /// Flattened `batch * seq_len` indices of real (non-padding) positions.
    pub fn valid_rows(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    /// Additive `[batch, seq, seq]` score bias hiding padded keys.
    pub fn key_bias(&self) -> Tensor {
        self.key_tensor(MASKED_SCORE, 0.0)
    }

    /// `[batch, seq, seq]` 0/1 tensor keeping real keys.
    pub fn key_keep(&self) -> Tensor {
        self.key_tensor(0.0, 1.0)
    }

    fn key_tensor(&self, masked: f64, kept: f64) -> Tensor {
        let s = self.seq_len;
        let mut data = Vec::with_capacity(self.batch * s * s);
        for row in self.mask.chunks(s) {
            for _ in 0..s {
                data.extend(row.iter().map(|&m| if m { kept } else { masked }));
            }
        }
        Tensor::new(vec![self.batch, s, s], data).expect("consistent shape")
    }
}

/// Per-head intermediates of one attention head.
#[derive(Debug, Clone)]
pub struct HeadTrace<'g> {
    pub query: Var<'g>,
    pub key: Var<'g>,
    pub value: Var<'g>,
    /// Row-softmaxed scaled scores, `[batch, seq, seq]`.
    pub attention: Var<'g>,
}

/// Intermediates of the self-attention sub-layer of one encoder layer.
#[derive(Debug, Clone)]
pub struct AttentionTrace<'g> {
    /// Concatenation of all heads' queries, `[batch, seq, d_h]`.
    pub query: Var<'g>,
    pub key: Var<'g>,
    pub value: Var<'g>,
    pub heads: Vec<HeadTrace<'g>>,
}

impl<'g> AttentionTrace<'g> {
    pub fn get(&self, which: Qkv) -> Var<'g> {
        match which {
            Qkv::Query => self.query,
            Qkv::Key => self.key,
            Qkv::Value => self.value,
        }
    }

    pub fn heads_of(&self, which: Qkv) -> Vec<Var<'g>> {
        self.heads
            .iter()
            .map(|h| match which {
                Qkv::Query => h.query,
                Qkv::Key => h.key,
                Qkv::Value => h.value,
            })
            .collect()
    }
}

/// Everything a forward pass exposes to the distillation losses.
#[derive(Debug, Clone)]
pub struct ForwardTrace<'g> {
    /// `H_0..H_L`, each `[batch, seq, d_h]`; `H_0` is the embedding output.
    pub hidden_states: Vec<Var<'g>>,
    /// Attention of layers `1..=L`; layer `l` reads `H_{l-1}`.
    pub attention: Vec<AttentionTrace<'g>>,
    /// `[batch, seq, |V|]` when the head was evaluated.
    pub logits: Option<Var<'g>>,
    pub input: EncoderInput,
}

impl<'g> ForwardTrace<'g> {
    pub fn num_layers(&self) -> usize {
        self.attention.len()
    }

    /// `H_i` for `i` in `0..=L`.
    pub fn hidden(&self, i: usize) -> Result<Var<'g>> {
        self.hidden_states
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidMapping(format!("hidden state {i} outside [0, {}]", self.num_layers())))
    }

    /// 1-based layer access.
    pub fn layer(&self, l: usize) -> Result<&AttentionTrace<'g>> {
        if l == 0 || l > self.attention.len() {
            return Err(Error::InvalidMapping(format!("layer {l} outside [1, {}]", self.attention.len())));
        }
        Ok(&self.attention[l - 1])
    }

    pub fn logits(&self) -> Result<Var<'g>> {
        self.logits.ok_or_else(|| Error::TraceMismatch("trace was recorded without the output head".into()))
    }
}

/// Model parameters registered on a graph.
pub struct BoundModel<'g> {
    config: ModelConfig,
    vars: Vec<Var<'g>>,
}

impl TransformerModel {
    /// Registers parameters as leaves; trainable ones follow `requires_grad`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundModel<'g> {
        BoundModel { config: self.config().clone(), vars: self.parameters().iter().map(|p| graph.leaf(p)).collect() }
    }

    /// Registers parameters as constants.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> BoundModel<'g> {
        BoundModel {
            config: self.config().clone(),
            vars: self.parameters().iter().map(|p| graph.constant(p)).collect(),
        }
    }
}

struct Options<'r> {
    logits: bool,
    dropout: Option<&'r mut dyn rand::RngCore>,
}

impl<'g> BoundModel<'g> {
    /// Uses caller-provided variables in canonical parameter order.
    pub fn from_vars(config: &ModelConfig, vars: Vec<Var<'g>>) -> Result<Self> {
        let want = FIRST_LAYER + config.num_layers * PER_LAYER + 1;
        if vars.len() != want {
            return Err(Error::ArchitectureMismatch(format!("{} variables for {want} parameters", vars.len())));
        }
        Ok(Self { config: config.clone(), vars })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    fn p(&self, l: usize, which: LayerParam) -> Var<'g> {
        self.vars[FIRST_LAYER + (l - 1) * PER_LAYER + which as usize]
    }

    pub fn forward(&self, input: &EncoderInput) -> Result<ForwardTrace<'g>> {
        self.run(input, Options { logits: true, dropout: None })
    }

    /// Forward pass with dropout active (no-op when the configured rate is 0).
    pub fn forward_train(&self, input: &EncoderInput, rng: &mut dyn rand::RngCore) -> Result<ForwardTrace<'g>> {
        self.run(input, Options { logits: true, dropout: Some(rng) })
    }

    /// Full trace except the output head (`logits` is `None`).
    pub fn forward_hidden(&self, input: &EncoderInput) -> Result<ForwardTrace<'g>> {
        self.run(input, Options { logits: false, dropout: None })
    }

    /// [`BoundModel::forward_hidden`] with dropout active.
    pub fn forward_hidden_train(&self, input: &EncoderInput, rng: &mut dyn rand::RngCore) -> Result<ForwardTrace<'g>> {
        self.run(input, Options { logits: false, dropout: Some(rng) })
    }

    /// Final hidden state `H_L` without evaluating the output head.
    pub fn encode(&self, input: &EncoderInput) -> Result<Var<'g>> {
        let trace = self.run(input, Options { logits: false, dropout: None })?;
        Ok(*trace.hidden_states.last().expect("H_0 always present"))
    }

    fn dropout(&self, x: Var<'g>, opts: &mut Options<'_>) -> Result<Var<'g>> {
        let rate = self.config.dropout;
        let Some(rng) = opts.dropout.as_deref_mut() else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let shape = x.shape();
        let len = shape.iter().product();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let mask = x.graph().constant(&Tensor::new(shape, mask)?);
        Ok(x.mul(mask)?)
    }

    fn run(&self, input: &EncoderInput, mut opts: Options<'_>) -> Result<ForwardTrace<'g>> {
        let cfg = &self.config;
        let (b, s, d) = (input.batch(), input.seq_len(), cfg.hidden_size);
        if s > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: s, max: cfg.max_seq_len });
        }
        if let Some(&id) = input.tokens().iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
        let g = self.vars[0].graph();
        let eps = cfg.layer_norm_eps;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();

        let tok = embedding(self.vars[TOKEN_EMBEDDING], input.tokens())?;
        let pos = embedding(self.vars[POSITION_EMBEDDING], &positions)?;
        let mut x = tok.add(pos)?.layernorm(self.vars[EMBED_NORM_GAIN], self.vars[EMBED_NORM_BIAS], eps)?;
        x = self.dropout(x, &mut opts)?;

        let bias = input.is_padded().then(|| g.constant(&input.key_bias()));
        let scale = 1.0 / (cfg.head_size() as f64).sqrt();
        let mut hidden_states = vec![x.reshape(&[b, s, d])?];
        let mut attention = Vec::with_capacity(cfg.num_layers);

        for l in 1..=cfg.num_layers {
            use LayerParam::*;
            let project = |w: LayerParam, bias: LayerParam| -> Result<Var<'g>> {
                Ok(x.matmul(self.p(l, w))?.add_bias(self.p(l, bias))?.reshape(&[b, s, d])?)
            };
            let query = project(QueryWeight, QueryBias)?;
            let key = project(KeyWeight, KeyBias)?;
            let value = project(ValueWeight, ValueBias)?;
            let qs = split_last(query, cfg.num_heads)?;
            let ks = split_last(key, cfg.num_heads)?;
            let vs = split_last(value, cfg.num_heads)?;

            let mut heads = Vec::with_capacity(cfg.num_heads);
            let mut outputs = Vec::with_capacity(cfg.num_heads);
            for ((q, k), v) in qs.into_iter().zip(ks).zip(vs) {
                let mut scores = q.bmm(k.transpose()?)?.scale(scale);
                if let Some(bias) = bias {
                    scores = scores.add(bias)?;
                }
                let probs = scores.softmax()?;
                outputs.push(probs.bmm(v)?);
                heads.push(HeadTrace { query: q, key: k, value: v, attention: probs });
            }
            let mha = concat_last(&outputs)?.reshape(&[b * s, d])?;
            let attn_out = mha.matmul(self.p(l, AttnOutWeight))?.add_bias(self.p(l, AttnOutBias))?;
            let attn_out = self.dropout(attn_out, &mut opts)?;
            let h1 = attn_out.add(x)?.layernorm(self.p(l, AttnNormGain), self.p(l, AttnNormBias), eps)?;

            let ff = h1
                .matmul(self.p(l, FfInWeight))?
                .add_bias(self.p(l, FfInBias))?
                .gelu()
                .matmul(self.p(l, FfOutWeight))?
                .add_bias(self.p(l, FfOutBias))?;
            let ff = self.dropout(ff, &mut opts)?;
            x = ff.add(h1)?.layernorm(self.p(l, FfNormGain), self.p(l, FfNormBias), eps)?;

            hidden_states.push(x.reshape(&[b, s, d])?);
            attention.push(AttentionTrace { query, key, value, heads });
        }

        let logits = if opts.logits {
            let head = *self.vars.last().expect("head present");
            Some(x.matmul(head)?.reshape(&[b, s, cfg.vocab_size])?)
        } else {
            None
        };
        Ok(ForwardTrace { hidden_states, attention, logits, input: input.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TransformerModel {
        let cfg = ModelConfig::new(2, 2, 8, 16, 13, 6).unwrap();
        TransformerModel::init(&cfg, 11).unwrap()
    }

    #[test]
    fn shapes_and_single_token_attention() {
        let m = model();
        let g = Graph::new();
        let trace = m.bind(&g).forward(&EncoderInput::single(&[5]).unwrap()).unwrap();
        for h in &trace.hidden_states {
            assert_eq!(h.shape(), vec![1, 1, 8]);
        }
        assert_eq!(trace.logits().unwrap().shape(), vec![1, 1, 13]);
        for layer in &trace.attention {
            for head in &layer.heads {
                assert_eq!(head.attention.value().data(), &[1.0]);
                assert_eq!(head.query.shape(), vec![1, 1, 4]);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_with_padding() {
        let m = model();
        let g = Graph::new();
        let input = EncoderInput::padded(&[vec![2, 7, 8, 3], vec![2, 9, 3]], 0).unwrap();
        let trace = m.bind(&g).forward(&input).unwrap();
        for layer in &trace.attention {
            for head in &layer.heads {
                let a = head.attention.value();
                for r in 0..a.rows() {
                    assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                // Second sequence's padded key gets (numerically) zero weight.
                assert!(a.at(&[1, 0, 3]) < 1e-300);
            }
        }
        assert!(trace.logits().unwrap().value().is_finite());
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let m = model();
        let g = Graph::new();
        let alone = m.bind_frozen(&g).forward(&EncoderInput::single(&[2, 9, 3]).unwrap()).unwrap();
        let padded = m
            .bind_frozen(&g)
            .forward(&EncoderInput::padded(&[vec![2, 9, 3], vec![2, 7, 8, 3, 4]], 0).unwrap())
            .unwrap();
        let a = alone.logits().unwrap().value();
        let p = padded.logits().unwrap().value();
        for i in 0..3 * 13 {
            assert!((a.data()[i] - p.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn input_validation() {
        let m = model();
        let g = Graph::new();
        let bound = m.bind(&g);
        assert!(matches!(
            bound.forward(&EncoderInput::single(&[13]).unwrap()),
            Err(Error::TokenOutOfRange { id: 13, vocab: 13 })
        ));
        assert!(matches!(
            bound.forward(&EncoderInput::single(&[1; 7]).unwrap()),
            Err(Error::SequenceTooLong { len: 7, max: 6 })
        ));
        assert!(EncoderInput::new(vec![1, 2, 3], 1, 3, Some(vec![true, false, true])).is_err());
    }

    #[test]
    fn dropout_zero_is_identity() {
        let m = model();
        let input = EncoderInput::single(&[2, 5, 6, 3]).unwrap();
        let g = Graph::new();
        let a = m.bind(&g).forward(&input).unwrap().logits().unwrap().value();
        let mut rng = rand::rng();
        let b = m.bind(&g).forward_train(&input, &mut rng).unwrap().logits().unwrap().value();
        assert!(a.bit_eq(&b));
    }
}
