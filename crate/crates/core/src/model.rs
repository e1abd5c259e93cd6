//! Causal byte-level transformer with a classification readout at the CLS
//! position.
//!
//! Every weight is addressable by a stable dotted name; linear weights are
//! stored `[out, in]` and applied as `x · Wᵀ`:
//!
//! | name                         | shape                  |
//! |------------------------------|------------------------|
//! | `tok_emb`                    | `[vocab, d_model]`     |
//! | `pos_emb`                    | `[max_len, d_model]`   |
//! | `layer.{i}.ln1.{gamma,beta}` | `[d_model]`            |
//! | `layer.{i}.attn.w_{q,k,v,o}` | `[d_model, d_model]`   |
//! | `layer.{i}.ln2.{gamma,beta}` | `[d_model]`            |
//! | `layer.{i}.mlp.w_up`         | `[d_ff, d_model]`      |
//! | `layer.{i}.mlp.w_down`       | `[d_model, d_ff]`      |
//! | `ln_f.{gamma,beta}`          | `[d_model]`            |
//! | `head.weight`                | `[n_classes, d_model]` |
//! | `head.bias` (optional)       | `[n_classes]`          |

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::numerics::{Element, SeqLayout, Tape, Tensor, Var};
use crate::quant::{Bits, QuantizedMatrix};
use crate::tokenizer::ByteTokenizer;

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub head_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: ByteTokenizer::default().vocab_size(),
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            max_len: 256,
            n_classes: 2,
            dropout: 0.0,
            head_bias: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn tokenizer(&self) -> Result<ByteTokenizer> {
        ByteTokenizer::new(self.max_len)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let tok = self.tokenizer()?;
        if self.vocab_size != tok.vocab_size() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match the byte tokenizer ({})",
                self.vocab_size,
                tok.vocab_size()
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is fixed at 0".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if !(2..=3).contains(&self.n_classes) {
            log::warn!(
                "n_classes = {} is outside the two supported tasks (2 or 3)",
                self.n_classes
            );
        }
        Ok(())
    }

    /// Names of the linear weights of layer `i`, in initialization order.
    pub fn layer_matrices(i: usize) -> [String; 6] {
        [
            format!("layer.{i}.attn.w_q"),
            format!("layer.{i}.attn.w_k"),
            format!("layer.{i}.attn.w_v"),
            format!("layer.{i}.attn.w_o"),
            format!("layer.{i}.mlp.w_up"),
            format!("layer.{i}.mlp.w_down"),
        ]
    }
}

/// A weight either held densely or as quantized codes.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight<T> {
    Dense(Tensor<T>),
    Quantized(QuantizedMatrix),
}

impl<T: Element> Weight<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            Weight::Dense(t) => t.shape(),
            Weight::Quantized(q) => q.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Dense values; quantized weights are dequantized on every call.
    pub fn materialize(&self) -> Result<Tensor<T>> {
        match self {
            Weight::Dense(t) => Ok(t.clone()),
            Weight::Quantized(q) => q.dequantize(),
        }
    }

    pub fn as_dense(&self) -> Option<&Tensor<T>> {
        match self {
            Weight::Dense(t) => Some(t),
            Weight::Quantized(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub weight: Weight<T>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies during training.
    pub decay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

impl ParamCount {
    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Token ids for a right-padded batch: `batch` rows of `seq_len` ids, the
/// first `lengths[b]` of which are real (the last real id is CLS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Right-pads encoded sequences to the longest one.
    pub fn from_sequences(seqs: &[Vec<u32>], pad_id: u32) -> Result<Self> {
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(pad_id).take(seq_len - s.len()));
        }
        let batch = Self {
            ids,
            batch: seqs.len(),
            seq_len,
            lengths: seqs.iter().map(Vec::len).collect(),
        };
        batch.layout()?;
        Ok(batch)
    }

    /// `true` at real tokens, `false` at padding.
    pub fn mask(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&l| (0..self.seq_len).map(move |t| t < l))
            .collect()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq_len..b * self.seq_len + self.lengths[b]]
    }

    pub fn layout(&self) -> Result<SeqLayout> {
        if self.ids.len() != self.batch * self.seq_len {
            return Err(Error::Dimension(format!(
                "{} ids for a {}x{} batch",
                self.ids.len(),
                self.batch,
                self.seq_len
            )));
        }
        SeqLayout::new(self.batch, self.seq_len, self.lengths.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    tokenizer: ByteTokenizer,
    params: BTreeMap<String, Param<T>>,
    adapters: BTreeMap<String, LoraAdapter<T>>,
}

impl<T: Element> TransformerModel<T> {
    /// Scaled-normal initialization: every matrix ~ N(0, 0.02²), output
    /// projections (`w_o`, `w_down`) additionally scaled by 1/√(2·n_layers);
    /// layer norms start at identity, the optional head bias at zero.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut sample = |shape: [usize; 2], factor: f64| -> Tensor<T> {
            let n = shape[0] * shape[1];
            let data = (0..n)
                .map(|_| T::from_f64_lossy(std.sample(&mut rng) * factor))
                .collect();
            Tensor::new(shape, data).expect("shape matches")
        };
        let (d, ff) = (config.d_model, config.d_ff);
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut params = BTreeMap::new();
        let mut put = |name: String, t: Tensor<T>| {
            params.insert(
                name,
                Param {
                    weight: Weight::Dense(t),
                    trainable: true,
                    decay: true,
                },
            );
        };
        put("tok_emb".into(), sample([config.vocab_size, d], 1.0));
        put("pos_emb".into(), sample([config.max_len, d], 1.0));
        for i in 0..config.n_layers {
            let [wq, wk, wv, wo, up, down] = ModelConfig::layer_matrices(i);
            put(wq, sample([d, d], 1.0));
            put(wk, sample([d, d], 1.0));
            put(wv, sample([d, d], 1.0));
            put(wo, sample([d, d], out_scale));
            put(up, sample([ff, d], 1.0));
            put(down, sample([d, ff], out_scale));
            for ln in ["ln1", "ln2"] {
                put(format!("layer.{i}.{ln}.gamma"), Tensor::full([d], T::one()));
                put(format!("layer.{i}.{ln}.beta"), Tensor::zeros([d]));
            }
        }
        put("ln_f.gamma".into(), Tensor::full([d], T::one()));
        put("ln_f.beta".into(), Tensor::zeros([d]));
        put(HEAD_WEIGHT.into(), sample([config.n_classes, d], 1.0));
        if config.head_bias {
            put(HEAD_BIAS.into(), Tensor::zeros([config.n_classes]));
        }
        let tokenizer = config.tokenizer()?;
        Ok(Self {
            config,
            tokenizer,
            params,
            adapters: BTreeMap::new(),
        })
    }

    /// Assembles a model from loaded parts, checking every expected tensor is
    /// present with the right shape.
    pub fn from_parts(
        config: ModelConfig,
        tokenizer: ByteTokenizer,
        params: BTreeMap<String, Param<T>>,
    ) -> Result<Self> {
        config.validate()?;
        tokenizer.validate()?;
        let reference = Self::init(ModelConfig {
            seed: 0,
            ..config.clone()
        })?;
        let mut problems = Vec::new();
        for (name, p) in &reference.params {
            match params.get(name) {
                None => problems.push(format!("missing tensor {name}")),
                Some(q) if q.weight.shape() != p.weight.shape() => problems.push(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    p.weight.shape(),
                    q.weight.shape()
                )),
                _ => {}
            }
        }
        for name in params.keys() {
            if !reference.params.contains_key(name) {
                problems.push(format!("unexpected tensor {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Mismatch(problems));
        }
        Ok(Self {
            config,
            tokenizer,
            params,
            adapters: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &ByteTokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &BTreeMap<String, Param<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no tensor named {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no tensor named {name}")))
    }

    pub fn adapters(&self) -> &BTreeMap<String, LoraAdapter<T>> {
        &self.adapters
    }

    pub(crate) fn adapters_mut(&mut self) -> &mut BTreeMap<String, LoraAdapter<T>> {
        &mut self.adapters
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.param_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    pub fn head_names(&self) -> Vec<&'static str> {
        if self.config.head_bias {
            vec![HEAD_WEIGHT, HEAD_BIAS]
        } else {
            vec![HEAD_WEIGHT]
        }
    }

    /// Names of the linear weights adapters may attach to.
    pub fn linear_names(&self) -> Vec<String> {
        (0..self.config.n_layers)
            .flat_map(ModelConfig::layer_matrices)
            .collect()
    }

    pub fn count_params(&self) -> ParamCount {
        let mut count = ParamCount {
            total: 0,
            trainable: 0,
        };
        for p in self.params.values() {
            count.total += p.weight.numel();
            if p.trainable {
                count.trainable += p.weight.numel();
            }
        }
        for a in self.adapters.values() {
            count.total += a.num_params();
            count.trainable += a.num_params();
        }
        count
    }

    /// Names of gradient-tracked tensors: trainable base tensors plus every
    /// adapter factor.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        for a in self.adapters.values() {
            names.push(a.a_name());
            names.push(a.b_name());
        }
        names
    }

    /// Mutable access to a trainable tensor by its tape name.
    pub(crate) fn trainable_tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        if let Some(target) = name.strip_suffix(".lora_a") {
            if self.adapters.contains_key(target) {
                return Ok(&mut self.adapters.get_mut(target).expect("checked").a);
            }
        }
        if let Some(target) = name.strip_suffix(".lora_b") {
            if self.adapters.contains_key(target) {
                return Ok(&mut self.adapters.get_mut(target).expect("checked").b);
            }
        }
        match self.params.get_mut(name) {
            Some(Param {
                weight: Weight::Dense(t),
                trainable: true,
                ..
            }) => Ok(t),
            _ => Err(Error::State(format!("{name} is not a trainable dense tensor"))),
        }
    }

    pub fn trainable_tensor(&self, name: &str) -> Option<&Tensor<T>> {
        if let Some(a) = name
            .strip_suffix(".lora_a")
            .and_then(|t| self.adapters.get(t))
        {
            return Some(&a.a);
        }
        if let Some(a) = name
            .strip_suffix(".lora_b")
            .and_then(|t| self.adapters.get(t))
        {
            return Some(&a.b);
        }
        self.params
            .get(name)
            .filter(|p| p.trainable)
            .and_then(|p| p.weight.as_dense())
    }

    pub fn is_decayable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable && p.decay)
    }

    /// Quantizes one frozen tensor in place.
    pub fn quantize_param(&mut self, name: &str, bits: Bits, block_size: usize) -> Result<()> {
        let p = self.param_mut(name)?;
        if p.trainable {
            return Err(Error::Contract(format!(
                "{name} is trainable; only frozen tensors may be quantized"
            )));
        }
        if let Weight::Dense(t) = &p.weight {
            p.weight = Weight::Quantized(QuantizedMatrix::quantize(t, bits, block_size)?);
        }
        Ok(())
    }

    /// Quantizes every frozen matrix (embeddings and linear weights). Layer
    /// norm vectors stay in full precision.
    pub fn quantize_frozen(&mut self, bits: Bits, block_size: usize) -> Result<usize> {
        let names: Vec<String> = self
            .params
            .iter()
            .filter(|(_, p)| !p.trainable && p.weight.shape().len() == 2)
            .map(|(n, _)| n.clone())
            .collect();
        for n in &names {
            self.quantize_param(n, bits, block_size)?;
        }
        Ok(names.len())
    }

    /// Frozen matrices that are still held densely.
    pub fn unquantized_frozen(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, p)| {
                !p.trainable && p.weight.shape().len() == 2 && p.weight.as_dense().is_some()
            })
            .map(|(n, _)| n.as_str())
            .collect()
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<SeqLayout> {
        if batch.seq_len > self.config.max_len {
            return Err(Error::Dimension(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq_len, self.config.max_len
            )));
        }
        if let Some(&bad) = batch
            .ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::Index(format!(
                "token id {bad} >= vocab size {}",
                self.config.vocab_size
            )));
        }
        batch.layout()
    }

    /// Places a named tensor on the tape, tracked only when it is trainable
    /// and `track` is set.
    fn bind(&self, tape: &mut Tape<T>, name: &str, track: bool) -> Result<Var> {
        let p = self.param(name)?;
        Ok(match &p.weight {
            Weight::Dense(t) if p.trainable && track => tape.param(name, t.clone()),
            w => tape.constant(w.materialize()?),
        })
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, name: &str, track: bool) -> Result<Var> {
        let w = self.bind(tape, name, track)?;
        let y = tape.matmul_nt(x, w)?;
        match self.adapters.get(name) {
            Some(adapter) => adapter.apply_on_tape(tape, x, y, track),
            None => Ok(y),
        }
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, prefix: &str, track: bool) -> Result<Var> {
        let g = self.bind(tape, &format!("{prefix}.gamma"), track)?;
        let b = self.bind(tape, &format!("{prefix}.beta"), track)?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// Records the forward pass on `tape` and returns the `[batch, n_classes]`
    /// logits node. With `track`, trainable tensors become named gradient
    /// leaves; everything else is a constant.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, batch: &TokenBatch, track: bool) -> Result<Var> {
        let layout = self.check_batch(batch)?;
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq_len).collect();

        let tok = self.bind(tape, "tok_emb", track)?;
        let pos = self.bind(tape, "pos_emb", track)?;
        let te = tape.embedding(tok, &ids)?;
        let pe = tape.embedding(pos, &positions)?;
        let mut h = tape.add(te, pe)?;

        for i in 0..self.config.n_layers {
            let [wq, wk, wv, wo, up, down] = ModelConfig::layer_matrices(i);
            let a = self.norm(tape, h, &format!("layer.{i}.ln1"), track)?;
            let q = self.linear(tape, a, &wq, track)?;
            let k = self.linear(tape, a, &wk, track)?;
            let v = self.linear(tape, a, &wv, track)?;
            let att = tape.causal_attention(q, k, v, self.config.n_heads, &layout)?;
            let o = self.linear(tape, att, &wo, track)?;
            h = tape.add(h, o)?;

            let m = self.norm(tape, h, &format!("layer.{i}.ln2"), track)?;
            let u = self.linear(tape, m, &up, track)?;
            let u = tape.gelu(u)?;
            let dn = self.linear(tape, u, &down, track)?;
            h = tape.add(h, dn)?;
        }

        let cls_rows: Vec<usize> = layout
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| b * batch.seq_len + len - 1)
            .collect();
        let cls = tape.gather_rows(h, &cls_rows)?;
        let cls = self.norm(tape, cls, "ln_f", track)?;
        let w = self.bind(tape, HEAD_WEIGHT, track)?;
        let mut logits = tape.matmul_nt(cls, w)?;
        if self.config.head_bias {
            let b = self.bind(tape, HEAD_BIAS, track)?;
            logits = tape.add_row(logits, b)?;
        }
        Ok(logits)
    }

    /// Inference forward pass returning `[batch, n_classes]` logits.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let logits = self.forward_on_tape(&mut tape, batch, false)?;
        Ok(tape.value(logits).clone())
    }

    /// Forward pass over a base whose frozen matrices are all quantized;
    /// blocks are dequantized as each weight is used, adapters stay in full
    /// precision.
    pub fn quantized_forward(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let missing = self.unquantized_frozen();
        if !missing.is_empty() {
            return Err(Error::State(format!(
                "frozen tensors not quantized: {}",
                missing.join(", ")
            )));
        }
        self.forward(batch)
    }

    /// Encodes texts and runs [`Self::forward`].
    pub fn forward_texts(&self, texts: &[&str]) -> Result<Tensor<T>> {
        let seqs: Vec<Vec<u32>> = texts.iter().map(|t| self.tokenizer.encode(t)).collect();
        self.forward(&TokenBatch::from_sequences(&seqs, self.tokenizer.pad_id)?)
    }

    /// 64-bit FNV-1a fingerprint of every frozen tensor's stored bytes.
    pub fn frozen_fingerprints(&self) -> BTreeMap<String, u64> {
        self.params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| (n.clone(), weight_fingerprint(&p.weight)))
            .collect()
    }
}

pub fn tensor_fingerprint<T: Element>(t: &Tensor<T>) -> u64 {
    let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size_of());
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    fnv1a(&bytes)
}

fn weight_fingerprint<T: Element>(w: &Weight<T>) -> u64 {
    match w {
        Weight::Dense(t) => tensor_fingerprint(t),
        Weight::Quantized(q) => {
            let mut bytes = q.codes().to_vec();
            for v in q.scales().iter().chain(q.offsets()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fnv1a(&bytes)
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
