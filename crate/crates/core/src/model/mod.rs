//! Bidirectional Transformer encoder with MLM, NSP, replaced-token and
//! sentiment heads.
//!
//! Layers use the post-norm residual arrangement:
//! `x = LN(x + Attn(x)); x = LN(x + FFN(x))`, with a GELU feed-forward.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::tokenizer::TokenizedPair;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// A batch of equal-length encoded sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub attn_mask: Vec<u8>,
}

impl Batch {
    pub fn new(seq_len: usize) -> Self {
        Self {
            batch: 0,
            seq_len,
            ids: Vec::new(),
            segments: Vec::new(),
            attn_mask: Vec::new(),
        }
    }

    pub fn push(&mut self, ids: &[u32], segments: &[u8], attn_mask: &[u8]) -> Result<()> {
        if ids.len() != self.seq_len || segments.len() != self.seq_len || attn_mask.len() != self.seq_len {
            return Err(Error::Dimension {
                op: "batch",
                lhs: vec![self.seq_len],
                rhs: vec![ids.len(), segments.len(), attn_mask.len()],
            });
        }
        self.ids.extend_from_slice(ids);
        self.segments.extend_from_slice(segments);
        self.attn_mask.extend_from_slice(attn_mask);
        self.batch += 1;
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a TokenizedPair>) -> Result<Self> {
        let mut iter = pairs.into_iter().peekable();
        let seq_len = iter
            .peek()
            .map(|p| p.len())
            .ok_or_else(|| Error::contract("empty batch"))?;
        let mut batch = Self::new(seq_len);
        for p in iter {
            batch.push(&p.ids, &p.segments, &p.attn_mask)?;
        }
        Ok(batch)
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    output: (ParamId, ParamId),
    attn_norm: (ParamId, ParamId),
    ff_inner: (ParamId, ParamId),
    ff_outer: (ParamId, ParamId),
    ff_norm: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct ParamIds {
    token: ParamId,
    position: ParamId,
    segment: ParamId,
    embed_norm: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    mlm: Option<ParamId>,
    nsp: (ParamId, ParamId),
    rtd: (ParamId, ParamId),
    sentiment: (ParamId, ParamId),
}

/// Parameter names and shapes in serialization order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, h, f) = (config.vocab_size, config.hidden_dim, config.ff_dim);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![v, h]),
        ("embeddings.position".to_string(), vec![config.max_len, h]),
        ("embeddings.segment".to_string(), vec![2, h]),
        ("embeddings.norm.gain".to_string(), vec![h]),
        ("embeddings.norm.bias".to_string(), vec![h]),
    ];
    for l in 0..config.num_layers {
        for proj in ["query", "key", "value", "output"] {
            out.push((format!("layer{l}.attention.{proj}.weight"), vec![h, h]));
            out.push((format!("layer{l}.attention.{proj}.bias"), vec![h]));
        }
        out.push((format!("layer{l}.attention.norm.gain"), vec![h]));
        out.push((format!("layer{l}.attention.norm.bias"), vec![h]));
        out.push((format!("layer{l}.ffn.inner.weight"), vec![h, f]));
        out.push((format!("layer{l}.ffn.inner.bias"), vec![f]));
        out.push((format!("layer{l}.ffn.outer.weight"), vec![f, h]));
        out.push((format!("layer{l}.ffn.outer.bias"), vec![h]));
        out.push((format!("layer{l}.ffn.norm.gain"), vec![h]));
        out.push((format!("layer{l}.ffn.norm.bias"), vec![h]));
    }
    if !config.tie_mlm_weights {
        out.push(("mlm.weight".to_string(), vec![h, v]));
    }
    out.push(("nsp.weight".to_string(), vec![h, 2]));
    out.push(("nsp.bias".to_string(), vec![2]));
    out.push(("rtd.weight".to_string(), vec![h, 1]));
    out.push(("rtd.bias".to_string(), vec![1]));
    out.push(("sentiment.weight".to_string(), vec![h, 1]));
    out.push(("sentiment.bias".to_string(), vec![1]));
    out
}

/// `parameter_layout(config).len()` without building the layout, so an
/// absurd layer count read from a file costs nothing to reject.
pub fn parameter_count(config: &ModelConfig) -> Option<usize> {
    let fixed = 5 + usize::from(!config.tie_mlm_weights) + 6;
    config.num_layers.checked_mul(16)?.checked_add(fixed)
}

/// Which parameter groups a training objective updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Mlm,
    Nsp,
    Rtd,
    Sentiment,
}

fn group_of(name: &str) -> ParamGroup {
    match name.split('.').next() {
        Some("mlm") => ParamGroup::Mlm,
        Some("nsp") => ParamGroup::Nsp,
        Some("rtd") => ParamGroup::Rtd,
        Some("sentiment") => ParamGroup::Sentiment,
        _ => ParamGroup::Encoder,
    }
}

/// Encoder weights plus all heads.
#[derive(Clone, Debug)]
pub struct Bert<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: ParamIds,
}

impl<T: Scalar> Bert<T> {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ParamStore::new();
        for (name, shape) in parameter_layout(&config) {
            let numel = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".gain") {
                vec![T::one(); numel]
            } else if name.ends_with(".bias") {
                vec![T::zero(); numel]
            } else {
                (0..numel).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect()
            };
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = parameter_count(&config);
        if expected != Some(params.len()) {
            return Err(Error::Checkpoint(format!(
                "config with {} layers does not match {} stored parameters",
                config.num_layers,
                params.len()
            )));
        }
        let layout = parameter_layout(&config);
        for (name, shape) in &layout {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let actual = params.value(id).shape();
            if actual != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {actual:?}, config expects {shape:?}"
                )));
            }
        }
        let get = |n: &str| params.id(n).expect("checked above");
        let pair = |prefix: &str, a: &str, b: &str| (get(&format!("{prefix}.{a}")), get(&format!("{prefix}.{b}")));
        let layers = (0..config.num_layers)
            .map(|l| {
                let wb = |p: &str| pair(&format!("layer{l}.{p}"), "weight", "bias");
                LayerIds {
                    query: wb("attention.query"),
                    key: wb("attention.key"),
                    value: wb("attention.value"),
                    output: wb("attention.output"),
                    attn_norm: pair(&format!("layer{l}.attention.norm"), "gain", "bias"),
                    ff_inner: wb("ffn.inner"),
                    ff_outer: wb("ffn.outer"),
                    ff_norm: pair(&format!("layer{l}.ffn.norm"), "gain", "bias"),
                }
            })
            .collect();
        let ids = ParamIds {
            token: get("embeddings.token"),
            position: get("embeddings.position"),
            segment: get("embeddings.segment"),
            embed_norm: pair("embeddings.norm", "gain", "bias"),
            layers,
            mlm: params.id("mlm.weight"),
            nsp: pair("nsp", "weight", "bias"),
            rtd: pair("rtd", "weight", "bias"),
            sentiment: pair("sentiment", "weight", "bias"),
        };
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Parameters belonging to any of `groups`, in store order.
    pub fn param_ids(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| groups.contains(&group_of(&p.name)))
            .map(|(id, _)| id)
            .collect()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Bert<U> {
        Bert::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    fn p(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param(&self.params, id)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.batch == 0 {
            return Err(Error::contract("empty batch"));
        }
        self.config.hidden_shape(batch.batch, batch.seq_len)?;
        if let Some(&bad) = batch.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        if batch.segments.iter().any(|&s| s > 1) {
            return Err(Error::contract("segment ids must be 0 or 1"));
        }
        Ok(())
    }

    /// Token + position + segment embeddings before normalization.
    pub fn embed_sum(&self, tape: &mut Tape<T>, batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        let (b, l) = (batch.batch, batch.seq_len);
        let token = self.p(tape, self.ids.token);
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let tok = tape.gather(token, &ids, &[b, l])?;
        let position = self.p(tape, self.ids.position);
        let positions: Vec<usize> = (0..l).collect();
        let pos = tape.gather(position, &positions, &[l])?;
        let segment = self.p(tape, self.ids.segment);
        let segs: Vec<usize> = batch.segments.iter().map(|&s| s as usize).collect();
        let seg = tape.gather(segment, &segs, &[b, l])?;
        let x = tape.add(tok, pos)?;
        tape.add(x, seg)
    }

    /// `[batch, seq_len, hidden]` embeddings after layer norm and dropout.
    pub fn embed(&self, tape: &mut Tape<T>, batch: &Batch, train: bool) -> Result<Var> {
        let x = self.embed_sum(tape, batch)?;
        let (g, b) = self.ids.embed_norm;
        let (g, b) = (self.p(tape, g), self.p(tape, b));
        let x = tape.layer_norm(x, g, b, T::from_f64_lossy(LAYER_NORM_EPS))?;
        tape.dropout(x, self.config.dropout, train)
    }

    /// Additive `[batch, 1, 1, seq_len]` mask: 0 on valid keys, −∞ on padding.
    pub fn attention_mask(&self, tape: &mut Tape<T>, batch: &Batch) -> Var {
        let data = batch
            .attn_mask
            .iter()
            .map(|&m| if m == 1 { T::zero() } else { T::neg_infinity() })
            .collect();
        tape.constant(Tensor::from_parts(vec![batch.batch, 1, 1, batch.seq_len], data))
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (self.p(tape, w), self.p(tape, b));
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn split_heads(&self, tape: &mut Tape<T>, x: Var, b: usize, l: usize) -> Result<Var> {
        let (heads, d) = (self.config.num_heads, self.config.head_dim());
        let x = tape.reshape(x, &[b, l, heads, d])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// Multi-head self-attention of layer `layer`. Returns the projected
    /// output `[b, L, h]` and the attention weights `[b, heads, L, L]`.
    ///
    /// Scores are `Q·Kᵀ / √head_dim` plus the additive padding mask,
    /// normalized by a softmax over keys, then used to average `V`.
    pub fn attention(&self, tape: &mut Tape<T>, x: Var, mask: Var, layer: usize, train: bool) -> Result<(Var, Var)> {
        let ids = self.ids.layers[layer].clone();
        let shape = tape.shape(x).to_vec();
        let (b, l, h) = (shape[0], shape[1], shape[2]);
        let q = self.linear(tape, x, ids.query)?;
        let k = self.linear(tape, x, ids.key)?;
        let v = self.linear(tape, x, ids.value)?;
        let q = self.split_heads(tape, q, b, l)?;
        let k = self.split_heads(tape, k, b, l)?;
        let v = self.split_heads(tape, v, b, l)?;
        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let scores = tape.batch_matmul(q, kt)?;
        let scale = T::one() / T::from_f64_lossy(self.config.head_dim() as f64).sqrt();
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, mask)?;
        let weights = tape.softmax(scores, 3)?;
        let ctx = tape.batch_matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, h])?;
        let out = self.linear(tape, ctx, ids.output)?;
        let out = tape.dropout(out, self.config.dropout, train)?;
        Ok((out, weights))
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let (g, b) = (self.p(tape, g), self.p(tape, b));
        tape.layer_norm(x, g, b, T::from_f64_lossy(LAYER_NORM_EPS))
    }

    fn layer(&self, tape: &mut Tape<T>, x: Var, mask: Var, layer: usize, train: bool) -> Result<Var> {
        let ids = self.ids.layers[layer].clone();
        let (a, _) = self.attention(tape, x, mask, layer, train)?;
        let x = tape.add(x, a)?;
        let x = self.norm(tape, x, ids.attn_norm)?;
        let f = self.linear(tape, x, ids.ff_inner)?;
        let f = tape.gelu(f);
        let f = self.linear(tape, f, ids.ff_outer)?;
        let f = tape.dropout(f, self.config.dropout, train)?;
        let x = tape.add(x, f)?;
        self.norm(tape, x, ids.ff_norm)
    }

    /// Hidden states `[batch, seq_len, hidden]`.
    pub fn encode(&self, tape: &mut Tape<T>, batch: &Batch, train: bool) -> Result<Var> {
        let mut x = self.embed(tape, batch, train)?;
        let mask = self.attention_mask(tape, batch);
        for layer in 0..self.config.num_layers {
            x = self.layer(tape, x, mask, layer, train)?;
        }
        Ok(x)
    }

    fn cls_vector(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        tape.select(hidden, 1, 0)
    }

    /// `hidden · W_vocab`, shape `[batch, seq_len, vocab_size]`.
    pub fn mlm_logits(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        let w = match self.ids.mlm {
            Some(id) => self.p(tape, id),
            None => {
                let token = self.p(tape, self.ids.token);
                tape.permute(token, &[1, 0])?
            }
        };
        tape.matmul(hidden, w)
    }

    /// Continuation logits `[batch, 2]` from the `[CLS]` vector; class 1
    /// means sentence B follows sentence A.
    pub fn nsp_logits(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        let cls = self.cls_vector(tape, hidden)?;
        self.linear(tape, cls, self.ids.nsp)
    }

    /// Per-position probability `[batch, seq_len]` that a token was
    /// replaced by the generator.
    pub fn rtd_probs(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        let shape = tape.shape(hidden).to_vec();
        let z = self.linear(tape, hidden, self.ids.rtd)?;
        let z = tape.reshape(z, &shape[..2])?;
        Ok(tape.sigmoid(z))
    }

    /// `sigmoid(w · cls + b)`, shape `[batch]`.
    pub fn sentiment_score(&self, tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
        let cls = self.cls_vector(tape, hidden)?;
        let z = self.linear(tape, cls, self.ids.sentiment)?;
        let b = tape.shape(z)[0];
        let z = tape.reshape(z, &[b])?;
        Ok(tape.sigmoid(z))
    }
}

/// Mean cross-entropy over positions whose label is not
/// [`IGNORE`](crate::corruption::IGNORE). Other positions contribute neither
/// value nor gradient.
pub fn masked_mlm_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[i64]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

pub fn nsp_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, is_next: &[bool]) -> Result<Var> {
    let labels: Vec<i64> = is_next.iter().map(|&n| n as i64).collect();
    tape.cross_entropy(logits, &labels)
}

pub fn sentiment_loss<T: Scalar>(tape: &mut Tape<T>, scores: Var, labels: &[u8]) -> Result<Var> {
    let targets: Vec<T> = labels.iter().map(|&y| T::from_f64_lossy(y as f64)).collect();
    tape.binary_cross_entropy(scores, &targets)
}
