use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Activation, InitScheme, ModelConfig};
use super::vocab::{tokenize, TokenSequence, Vocabulary};
use crate::moe::{MoeConfig, MoeLayer, RoutingContext, RoutingRecord};
use crate::{ops, Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-12;

/// Where freshly constructed parameters get their values from.
pub(crate) trait ParamSource {
    fn normal(&mut self, name: &str, shape: &[usize]) -> Result<Var>;
    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var>;
    fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Var>;
}

/// Seeded normal(0, std) matrices, zero biases, unit norm scales.
pub(crate) struct RandomInit {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    dtype: DType,
}

impl RandomInit {
    pub(crate) fn new(seed: u64, std: f64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, std).expect("finite std"),
            dtype,
        }
    }
}

impl ParamSource for RandomInit {
    fn normal(&mut self, _name: &str, shape: &[usize]) -> Result<Var> {
        let n = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        let t = ops::tensor_from_f64(values, shape, self.dtype, &Device::Cpu)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn zeros(&mut self, _name: &str, shape: &[usize]) -> Result<Var> {
        Ok(Var::zeros(shape, self.dtype, &Device::Cpu)?)
    }

    fn ones(&mut self, _name: &str, shape: &[usize]) -> Result<Var> {
        Ok(Var::ones(shape, self.dtype, &Device::Cpu)?)
    }
}

/// Takes named tensors out of a loaded checkpoint, checking shapes.
pub(crate) struct TensorMap {
    pub(crate) tensors: HashMap<String, Tensor>,
}

impl TensorMap {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.dims() != shape {
            return Err(Error::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.dims().to_vec(),
            });
        }
        Ok(Var::from_tensor(&t)?)
    }
}

impl ParamSource for TensorMap {
    fn normal(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.take(name, shape)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.take(name, shape)
    }

    fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.take(name, shape)
    }
}

/// Copies a variable into fresh storage so the two never alias.
pub(crate) fn fresh_var(v: &Var) -> Result<Var> {
    Ok(Var::from_tensor(&v.as_tensor().detach().copy()?)?)
}

/// Dense layer computing `x · weight + bias`, `weight` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    fn build(src: &mut dyn ParamSource, prefix: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: src.normal(&format!("{prefix}.weight"), &[input, output])?,
            bias: src.zeros(&format!("{prefix}.bias"), &[output])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::affine_last(x, &self.weight, &self.bias)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    fn map_vars(&self, f: &mut dyn FnMut(&Var) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            weight: f(&self.weight)?,
            bias: f(&self.bias)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Var,
    pub bias: Var,
}

impl LayerNorm {
    fn build(src: &mut dyn ParamSource, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: src.ones(&format!("{prefix}.weight"), &[dim])?,
            bias: src.zeros(&format!("{prefix}.bias"), &[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.weight, &self.bias, LAYER_NORM_EPS)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    fn map_vars(&self, f: &mut dyn FnMut(&Var) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            weight: f(&self.weight)?,
            bias: f(&self.bias)?,
        })
    }
}

/// Bidirectional multi-head self-attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    fn build(src: &mut dyn ParamSource, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::build(src, &format!("{prefix}.query"), d, d)?,
            key: Linear::build(src, &format!("{prefix}.key"), d, d)?,
            value: Linear::build(src, &format!("{prefix}.value"), d, d)?,
            output: Linear::build(src, &format!("{prefix}.output"), d, d)?,
        })
    }

    /// `x`: `(B, L, d)`; `bias`: additive key mask of shape `(B, 1, 1, L)`.
    pub fn forward(&self, x: &Tensor, bias: &Tensor, num_heads: usize) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let head_dim = d / num_heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, num_heads, head_dim))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(bias)?;
        let probs = ops::softmax_last(&scores)?;
        let context = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, l, d))?;
        self.output.forward(&context)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        self.query.params(&format!("{prefix}.query"), out);
        self.key.params(&format!("{prefix}.key"), out);
        self.value.params(&format!("{prefix}.value"), out);
        self.output.params(&format!("{prefix}.output"), out);
    }

    fn map_vars(&self, f: &mut dyn FnMut(&Var) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            query: self.query.map_vars(f)?,
            key: self.key.map_vars(f)?,
            value: self.value.map_vars(f)?,
            output: self.output.map_vars(f)?,
        })
    }
}

/// Position-wise MLP `σ(X·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    fn build(src: &mut dyn ParamSource, prefix: &str, d: usize, inner: usize) -> Result<Self> {
        Ok(Self {
            w1: src.normal(&format!("{prefix}.w1"), &[d, inner])?,
            b1: src.zeros(&format!("{prefix}.b1"), &[inner])?,
            w2: src.normal(&format!("{prefix}.w2"), &[inner, d])?,
            b2: src.zeros(&format!("{prefix}.b2"), &[d])?,
        })
    }

    pub fn forward(&self, x: &Tensor, activation: Activation) -> Result<Tensor> {
        let inner = activation.apply(&ops::affine_last(x, &self.w1, &self.b1)?)?;
        ops::affine_last(&inner, &self.w2, &self.b2)
    }

    pub fn num_params(&self) -> usize {
        [&self.w1, &self.b1, &self.w2, &self.b2].iter().map(|v| v.elem_count()).sum()
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        for (n, v) in [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)] {
            out.push((format!("{prefix}.{n}"), v.clone()));
        }
    }

    pub(crate) fn map_vars(&self, f: &mut dyn FnMut(&Var) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            w1: f(&self.w1)?,
            b1: f(&self.b1)?,
            w2: f(&self.w2)?,
            b2: f(&self.b2)?,
        })
    }
}

/// The MLP slot of a block: the original dense MLP or a set of experts.
#[derive(Debug, Clone)]
pub enum FeedForward {
    Dense(Mlp),
    Experts(MoeLayer),
}

#[derive(Debug, Clone)]
pub struct Block {
    pub attention: Attention,
    pub attention_norm: LayerNorm,
    pub feed_forward: FeedForward,
    pub output_norm: LayerNorm,
}

impl Block {
    fn params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        self.attention.params(&format!("{prefix}.attention"), out);
        self.attention_norm.params(&format!("{prefix}.attention_norm"), out);
        match &self.feed_forward {
            FeedForward::Dense(mlp) => mlp.params(&format!("{prefix}.mlp"), out),
            FeedForward::Experts(layer) => layer.params(prefix, out),
        }
        self.output_norm.params(&format!("{prefix}.output_norm"), out);
    }

    fn map_vars(&self, f: &mut dyn FnMut(&Var) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            attention: self.attention.map_vars(f)?,
            attention_norm: self.attention_norm.map_vars(f)?,
            feed_forward: match &self.feed_forward {
                FeedForward::Dense(mlp) => FeedForward::Dense(mlp.map_vars(f)?),
                FeedForward::Experts(layer) => FeedForward::Experts(layer.map_vars(f)?),
            },
            output_norm: self.output_norm.map_vars(f)?,
        })
    }
}

/// All learnable tensors of an encoder.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub embedding_norm: LayerNorm,
    pub blocks: Vec<Block>,
    pub pooler: Linear,
}

impl EncoderWeights {
    pub(crate) fn build(
        config: &ModelConfig,
        moe: Option<&MoeConfig>,
        src: &mut dyn ParamSource,
    ) -> Result<Self> {
        let d = config.hidden_dim;
        let token_embedding = src.normal("embeddings.token", &[config.vocab_size, d])?;
        let position_embedding = src.normal("embeddings.position", &[config.max_seq_len, d])?;
        let embedding_norm = LayerNorm::build(src, "embeddings.norm", d)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let prefix = format!("block.{i}");
            let attention = Attention::build(src, &format!("{prefix}.attention"), d)?;
            let attention_norm = LayerNorm::build(src, &format!("{prefix}.attention_norm"), d)?;
            let feed_forward = match moe {
                Some(cfg) if cfg.extended_layers.contains(&i) => FeedForward::Experts(
                    MoeLayer::build(src, &prefix, d, config.intermediate_dim, cfg.num_experts)?,
                ),
                _ => FeedForward::Dense(Mlp::build(
                    src,
                    &format!("{prefix}.mlp"),
                    d,
                    config.intermediate_dim,
                )?),
            };
            let output_norm = LayerNorm::build(src, &format!("{prefix}.output_norm"), d)?;
            blocks.push(Block {
                attention,
                attention_norm,
                feed_forward,
                output_norm,
            });
        }
        let pooler = Linear::build(src, "pooler", d, d)?;
        Ok(Self {
            token_embedding,
            position_embedding,
            embedding_norm,
            blocks,
            pooler,
        })
    }

    /// Every parameter with its checkpoint name, in canonical order.
    pub fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = vec![
            ("embeddings.token".to_string(), self.token_embedding.clone()),
            ("embeddings.position".to_string(), self.position_embedding.clone()),
        ];
        self.embedding_norm.params("embeddings.norm", &mut out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.params(&format!("block.{i}"), &mut out);
        }
        self.pooler.params("pooler", &mut out);
        out
    }

    pub(crate) fn map_vars(&self, f: &mut dyn FnMut(&Var) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            token_embedding: f(&self.token_embedding)?,
            position_embedding: f(&self.position_embedding)?,
            embedding_norm: self.embedding_norm.map_vars(f)?,
            blocks: self.blocks.iter().map(|b| b.map_vars(f)).collect::<Result<_>>()?,
            pooler: self.pooler.map_vars(f)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// A batch of token sequences ready for [`Encoder::forward`].
#[derive(Debug, Clone)]
pub struct EncoderInput {
    /// `(B, L)` token ids.
    pub ids: Tensor,
    /// `B` rows of `L` mask bits, 1 for real tokens.
    pub mask: Vec<Vec<u8>>,
    /// Domain of each sequence; drives enforced routing and routing losses.
    pub domains: Vec<Option<String>>,
}

impl EncoderInput {
    pub fn batch_size(&self) -> usize {
        self.mask.len()
    }

    pub fn seq_len(&self) -> usize {
        self.mask.first().map_or(0, Vec::len)
    }
}

/// Hidden states `X^(0) ..= X^(T)`, each `(B, L, d)`, plus routing decisions
/// for every expert block.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden_states: Vec<Tensor>,
    pub routing: Vec<RoutingRecord>,
}

impl EncoderOutput {
    pub fn last_hidden(&self) -> &Tensor {
        self.hidden_states.last().expect("at least the embedding output")
    }
}

/// BERT-style post-norm encoder with a tanh pooler, optionally carrying
/// mixture-of-experts blocks.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub(crate) config: ModelConfig,
    pub(crate) vocab: Vocabulary,
    pub(crate) weights: EncoderWeights,
    pub(crate) moe: Option<MoeConfig>,
    pub(crate) init: InitScheme,
    pub(crate) use_domain_tokens: bool,
    pub(crate) dtype: DType,
}

impl Encoder {
    /// Randomly initialized dense encoder.
    pub fn new(config: ModelConfig, vocab: Vocabulary, init: InitScheme, dtype: DType) -> Result<Self> {
        config.validate()?;
        if vocab.len() > config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut src = RandomInit::new(init.seed, init.weight_std, dtype);
        let weights = EncoderWeights::build(&config, None, &mut src)?;
        Ok(Self {
            config,
            vocab,
            weights,
            moe: None,
            init,
            use_domain_tokens: true,
            dtype,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        weights: EncoderWeights,
        moe: Option<MoeConfig>,
        init: InitScheme,
        use_domain_tokens: bool,
    ) -> Result<Self> {
        let dtype = weights.token_embedding.dtype();
        Ok(Self {
            config,
            vocab,
            weights,
            moe,
            init,
            use_domain_tokens,
            dtype,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn weights(&self) -> &EncoderWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut EncoderWeights {
        &mut self.weights
    }

    pub fn moe(&self) -> Option<&MoeConfig> {
        self.moe.as_ref()
    }

    pub fn init_scheme(&self) -> &InitScheme {
        &self.init
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Whether a sequence's domain token replaces `[CLS]`.
    pub fn use_domain_tokens(&self) -> bool {
        self.use_domain_tokens
    }

    pub fn set_use_domain_tokens(&mut self, yes: bool) {
        self.use_domain_tokens = yes;
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        self.weights.named_params()
    }

    pub fn num_params(&self) -> usize {
        self.weights.num_params()
    }

    /// Copy with independent storage for every parameter.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut copy = |v: &Var| fresh_var(v);
        Ok(Self {
            weights: self.weights.map_vars(&mut copy)?,
            ..self.clone()
        })
    }

    /// Copy converted to another floating-point precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut convert = |v: &Var| -> Result<Var> {
            Ok(Var::from_tensor(&v.as_tensor().detach().to_dtype(dtype)?.copy()?)?)
        };
        Ok(Self {
            weights: self.weights.map_vars(&mut convert)?,
            dtype,
            ..self.clone()
        })
    }

    /// Tokenizes one text against this model's vocabulary and length limit.
    pub fn tokenize(&self, text: &str, domain: Option<&str>) -> Result<TokenSequence> {
        let token_domain = if self.use_domain_tokens { domain } else { None };
        tokenize(text, token_domain, &self.vocab, self.config.max_seq_len)
    }

    /// Tokenizes a batch. Trailing columns that are padding in every row are
    /// dropped, which leaves the encoder output unchanged.
    pub fn prepare(&self, texts: &[&str], domains: &[Option<&str>]) -> Result<EncoderInput> {
        if texts.len() != domains.len() {
            return Err(Error::Config("texts and domains differ in length".into()));
        }
        let seqs = texts
            .iter()
            .zip(domains)
            .map(|(t, d)| self.tokenize(t, *d))
            .collect::<Result<Vec<_>>>()?;
        let domains = domains.iter().map(|d| d.map(str::to_string)).collect();
        self.input_from_sequences(&seqs, domains)
    }

    pub fn input_from_sequences(
        &self,
        seqs: &[TokenSequence],
        domains: Vec<Option<String>>,
    ) -> Result<EncoderInput> {
        if seqs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if domains.len() != seqs.len() {
            return Err(Error::Config("one domain entry per sequence required".into()));
        }
        let width = seqs
            .iter()
            .map(|s| s.mask.iter().rposition(|&m| m == 1).map_or(1, |p| p + 1))
            .max()
            .unwrap_or(1);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.ids.len() != s.mask.len() || s.ids.len() < width {
                return Err(Error::Data("malformed token sequence".into()));
            }
            if s.mask[0] != 1 {
                return Err(Error::Data("position 0 must be a real token".into()));
            }
            if let Some(&bad) = s.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(Error::Data(format!("token id {bad} outside vocabulary")));
            }
            ids.extend_from_slice(&s.ids[..width]);
            mask.push(s.mask[..width].to_vec());
        }
        let ids = Tensor::from_vec(ids, (seqs.len(), width), &Device::Cpu)?;
        Ok(EncoderInput { ids, mask, domains })
    }

    fn attention_bias(&self, mask: &[Vec<u8>]) -> Result<Tensor> {
        let b = mask.len();
        let l = mask[0].len();
        let values: Vec<f64> = mask
            .iter()
            .flat_map(|row| row.iter().map(|&m| if m == 1 { 0.0 } else { ops::MASK_BIAS }))
            .collect();
        ops::tensor_from_f64(values, &[b, 1, 1, l], self.dtype, &Device::Cpu)
    }

    /// Runs the embedding layer and all blocks.
    pub fn forward(&self, input: &EncoderInput) -> Result<EncoderOutput> {
        let (b, l) = input.ids.dims2()?;
        if l > self.config.max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {l} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if input.mask.len() != b || input.domains.len() != b {
            return Err(Error::Data("mask/domains do not match the batch".into()));
        }
        let d = self.config.hidden_dim;
        let w = &self.weights;
        let tokens = w
            .token_embedding
            .index_select(&input.ids.flatten_all()?, 0)?
            .reshape((b, l, d))?;
        let positions = w.position_embedding.narrow(0, 0, l)?;
        let mut x = w.embedding_norm.forward(&tokens.broadcast_add(&positions)?)?;
        let bias = self.attention_bias(&input.mask)?;

        let mut hidden_states = Vec::with_capacity(w.blocks.len() + 1);
        let mut routing = Vec::new();
        hidden_states.push(x.clone());
        for (i, block) in w.blocks.iter().enumerate() {
            let attended = block.attention.forward(&x, &bias, self.config.num_heads)?;
            let h = block.attention_norm.forward(&(&x + attended)?)?;
            let ff = match &block.feed_forward {
                FeedForward::Dense(mlp) => mlp.forward(&h, self.config.activation)?,
                FeedForward::Experts(layer) => {
                    let cfg = self.moe.as_ref().ok_or_else(|| {
                        Error::Config("expert block without a routing configuration".into())
                    })?;
                    let ctx = RoutingContext {
                        cfg,
                        mask: &input.mask,
                        domains: &input.domains,
                    };
                    let record = layer.route(i, &x, &ctx)?;
                    let out = layer.dispatch(&h, &record, self.config.activation)?;
                    routing.push(record);
                    out
                }
            };
            x = block.output_norm.forward(&(h + ff)?)?;
            hidden_states.push(x.clone());
        }
        Ok(EncoderOutput {
            hidden_states,
            routing,
        })
    }

    /// `tanh(x₀ · W_p + b_p)` over the position-0 vector of each sequence.
    pub fn pool(&self, last_hidden: &Tensor) -> Result<Tensor> {
        let first = last_hidden.narrow(1, 0, 1)?.squeeze(1)?;
        Ok(self.weights.pooler.forward(&first)?.tanh()?)
    }

    /// Pooled `(B, d)` embeddings plus routing records.
    pub fn embed(&self, input: &EncoderInput) -> Result<(Tensor, Vec<RoutingRecord>)> {
        let out = self.forward(input)?;
        let pooled = self.pool(out.last_hidden())?;
        Ok((pooled, out.routing))
    }

    /// Embeds texts in chunks and returns plain vectors.
    pub fn embed_texts(&self, texts: &[&str], domains: &[Option<&str>], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(texts.len());
        for (t, d) in texts.chunks(chunk).zip(domains.chunks(chunk)) {
            let input = self.prepare(t, d)?;
            let (pooled, _) = self.embed(&input)?;
            out.extend(ops::to_f64_rows(&pooled.detach())?);
        }
        Ok(out)
    }
}
