//! Decoder-only transformer language model.
//!
//! Pre-norm residual blocks (`x + attn(ln1(x))`, then `x + mlp(ln2(x))`),
//! rotary positions applied to queries and keys of every head, tanh-GELU
//! feed-forward, final layer norm and an untied output head.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};
use crate::rope::{RopeConfig, RopeTable};

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    pub rope: RopeConfig,
    pub seed: u64,
}

impl ModelConfig {
    /// One layer, d_model 16, vocab 11: small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 11,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            head_dim: 8,
            ffn_mult: 4,
            rope: RopeConfig::new(8),
            seed: 0,
        }
    }

    /// Two layers, d_model 64, two heads, byte vocabulary.
    pub fn small() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            head_dim: 32,
            ffn_mult: 4,
            rope: RopeConfig::new(32),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn rope(&self) -> RopeConfig {
        self.rope
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("n_layers, n_heads and ffn_mult must be positive".into()));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.rope.head_dim != self.head_dim {
            return Err(Error::Config(format!(
                "rope head_dim {} != head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        self.rope.validate()
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.ffn_dim());
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        v * d + self.n_layers * per_layer + 2 * d + d * v + v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k", "attn.w_v", "attn.b_v",
    "attn.w_o", "attn.b_o", "ln2.gain", "ln2.bias", "mlp.w_fc", "mlp.b_fc", "mlp.w_proj", "mlp.b_proj",
];

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v,
            &self.b_v, &self.w_o, &self.b_o, &self.ln2_gain, &self.ln2_bias, &self.w_fc, &self.b_fc,
            &self.w_proj, &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w_q, &mut self.b_q, &mut self.w_k,
            &mut self.b_k, &mut self.w_v, &mut self.b_v, &mut self.w_o, &mut self.b_o,
            &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w_fc, &mut self.b_fc,
            &mut self.w_proj, &mut self.b_proj,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("valid shape")
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n])
}

/// Seeded initialization: N(0, 0.02) weights, residual output projections
/// scaled down by `sqrt(2 * n_layers)`, zero biases, unit norm gains.
pub fn init(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let (v, d, f) = (config.vocab_size, config.d_model, config.ffn_dim());
    let mut ini = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let resid_std = INIT_STD / (2.0 * config.n_layers as f32).sqrt();
    let embedding = ini.normal(&[v, d], INIT_STD);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            w_q: ini.normal(&[d, d], INIT_STD),
            b_q: zeros(d),
            w_k: ini.normal(&[d, d], INIT_STD),
            b_k: zeros(d),
            w_v: ini.normal(&[d, d], INIT_STD),
            b_v: zeros(d),
            w_o: ini.normal(&[d, d], resid_std),
            b_o: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            w_fc: ini.normal(&[d, f], INIT_STD),
            b_fc: zeros(f),
            w_proj: ini.normal(&[f, d], resid_std),
            b_proj: zeros(d),
        })
        .collect();
    let head_w = ini.normal(&[d, v], INIT_STD);
    Ok(ModelParams {
        config: config.clone(),
        embedding,
        layers,
        ln_f_gain: ones(d),
        ln_f_bias: zeros(d),
        head_w,
        head_b: zeros(v),
    })
}

impl ModelParams {
    /// Parameter tensors in canonical order (the checkpoint and optimizer order).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.ln_f_gain, &self.ln_f_bias, &self.head_w, &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.ln_f_gain, &mut self.ln_f_bias, &mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["embedding".to_string()];
        for i in 0..self.layers.len() {
            out.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{i}.{f}")));
        }
        out.extend(["ln_f.gain", "ln_f.bias", "head.w", "head.b"].map(String::from));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// FNV-1a over the raw parameter bits; cheap identity check for state continuity.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.clear_grad();
        }
    }
}

/// Parameters bound into a graph, in canonical order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    n_layers: usize,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn embedding(&self) -> Var {
        self.vars[0]
    }

    fn layer(&self, l: usize, field: usize) -> Var {
        self.vars[1 + l * LAYER_FIELDS.len() + field]
    }

    fn tail(&self, i: usize) -> Var {
        self.vars[1 + self.n_layers * LAYER_FIELDS.len() + i]
    }
}

/// Copies parameters into `graph` as gradient-receiving leaves.
pub fn bind(graph: &mut Graph, params: &ModelParams) -> BoundParams {
    let vars = params.tensors().into_iter().map(|t| graph.param(t.clone())).collect();
    BoundParams {
        vars,
        n_layers: params.layers.len(),
    }
}

/// Same as [`bind`] but as constants (no gradients kept).
pub fn bind_frozen(graph: &mut Graph, params: &ModelParams) -> BoundParams {
    let vars = params.tensors().into_iter().map(|t| graph.input(t.clone())).collect();
    BoundParams {
        vars,
        n_layers: params.layers.len(),
    }
}

/// Adds the accumulated gradients of `bound` into the parameter grad slots.
pub fn collect_grads(graph: &Graph, bound: &BoundParams, params: &mut ModelParams) {
    for (t, &v) in params.tensors_mut().into_iter().zip(&bound.vars) {
        if let Some(g) = graph.grad(v) {
            t.accumulate_grad(g);
        }
    }
}

fn check_extent(config: &ModelConfig, seq_len: usize, table: &RopeTable) -> Result<()> {
    if table.head_dim() != config.head_dim {
        return Err(Error::Dimension {
            op: "rope table",
            lhs: vec![table.head_dim()],
            rhs: vec![config.head_dim],
        });
    }
    if seq_len == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    if seq_len > table.max_position() {
        return Err(Error::Range {
            position: seq_len - 1,
            max_position: table.max_position(),
        });
    }
    Ok(())
}

/// Builds the forward pass for `inputs` laid out as `[batch × seq_len]` and
/// returns the logits node `[(batch·seq_len) × vocab]`.
pub fn logits(
    graph: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    inputs: &[u32],
    seq_len: usize,
    table: &Arc<RopeTable>,
) -> Result<Var> {
    check_extent(config, seq_len, table)?;
    if inputs.len() % seq_len != 0 {
        return Err(Error::Dimension {
            op: "logits",
            lhs: vec![inputs.len()],
            rhs: vec![seq_len],
        });
    }
    let heads = config.n_heads;
    let mut x = graph.embedding(bound.embedding(), inputs)?;
    for l in 0..config.n_layers {
        let p = |f: usize| bound.layer(l, f);
        let h = graph.layer_norm(x, p(0), p(1))?;
        let q = graph.linear(h, p(2), Some(p(3)))?;
        let k = graph.linear(h, p(4), Some(p(5)))?;
        let v = graph.linear(h, p(6), Some(p(7)))?;
        let q = graph.rope(q, table, seq_len, heads)?;
        let k = graph.rope(k, table, seq_len, heads)?;
        let a = graph.causal_attention(q, k, v, seq_len, heads)?;
        let o = graph.linear(a, p(8), Some(p(9)))?;
        x = graph.add(x, o)?;
        let h = graph.layer_norm(x, p(10), p(11))?;
        let f = graph.linear(h, p(12), Some(p(13)))?;
        let f = graph.gelu(f);
        let f = graph.linear(f, p(14), Some(p(15)))?;
        x = graph.add(x, f)?;
    }
    let x = graph.layer_norm(x, bound.tail(0), bound.tail(1))?;
    graph.linear(x, bound.tail(2), Some(bound.tail(3)))
}

/// Mean next-token cross-entropy over a `[batch × seq_len]` batch.
pub fn loss(
    graph: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    inputs: &[u32],
    targets: &[u32],
    seq_len: usize,
    table: &Arc<RopeTable>,
) -> Result<Var> {
    let lg = logits(graph, bound, config, inputs, seq_len, table)?;
    graph.cross_entropy(lg, targets)
}

/// Logits `[T × vocab]` for a single sequence.
pub fn forward(params: &ModelParams, tokens: &[u32], table: &Arc<RopeTable>) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = bind_frozen(&mut g, params);
    let out = logits(&mut g, &bound, &params.config, tokens, tokens.len(), table)?;
    Ok(g.value(out).clone())
}

/// Output and attention weights of a single causal head.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Tensor,
    /// Row-major `[T × T]`; row `t` holds the weights over positions `0..T`.
    pub weights: Vec<f32>,
}

/// Single-head causal attention over rotary-encoded `q` and `k`.
///
/// `positions[t]` is the rotary position of row `t` and must be strictly
/// increasing; masking is by row order.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, table: &RopeTable, positions: &[usize]) -> Result<AttentionOutput> {
    let t = q.rows();
    let hd = q.cols();
    if k.shape() != q.shape() || v.shape() != q.shape() || positions.len() != t || hd != table.head_dim() {
        return Err(Error::Dimension {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: vec![positions.len(), table.head_dim()],
        });
    }
    if positions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Contract("attention positions must be strictly increasing".into()));
    }
    let mut qr = q.data().to_vec();
    let mut kr = k.data().to_vec();
    for (i, &pos) in positions.iter().enumerate() {
        table.check_position(pos)?;
        table.rotate(&mut qr[i * hd..(i + 1) * hd], pos);
        table.rotate(&mut kr[i * hd..(i + 1) * hd], pos);
    }
    let mut g = Graph::new();
    let qv = g.input(Tensor::new(vec![t, hd], qr)?);
    let kv = g.input(Tensor::new(vec![t, hd], kr)?);
    let vv = g.input(Tensor::new(vec![t, hd], v.data().to_vec())?);
    let out = g.causal_attention(qv, kv, vv, t, 1)?;
    let weights = g.attention_weights(out).expect("attention node").to_vec();
    Ok(AttentionOutput {
        output: g.value(out).clone(),
        weights,
    })
}
