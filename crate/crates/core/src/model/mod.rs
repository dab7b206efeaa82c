//! Decoder-only transformer: token embedding `E`, a pre-norm causal stack
//! with learned positions, and a decode matrix `W_d` read off the final
//! residual stream.
//!
//! Two forward paths share one set of weights: an incremental KV-cached
//! path for generation ([`ModelParams::forward_stack`]) and a recorded
//! full-sequence path for training ([`ModelParams::forward_graph`]).

mod checkpoint;
mod transformer;

pub use checkpoint::{Checkpoint, OPTIM_PREFIX};
pub use transformer::{KvCache, ParamVars};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax_in_place, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            embed_dim: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            max_seq_len: 48,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_ratio == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidConfig(
                "layers, mlp_ratio and max_seq_len must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of the stack output; equal to the input width here.
    pub fn output_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Softmax temperature; zero is the argmax limit.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const GREEDY: Temperature = Temperature(0.0);
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_nan() || tau < 0.0 {
            return Err(Error::NegativeTemperature(tau));
        }
        Ok(Self(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Temperature::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Indices of every named tensor in [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
    pub w_dec: usize,
}

impl Layout {
    /// Names and shapes in storage order, plus the index map.
    fn build(cfg: &ModelConfig) -> (Vec<(String, [usize; 2])>, Layout) {
        let d = cfg.embed_dim;
        let h = cfg.mlp_dim();
        let mut specs: Vec<(String, [usize; 2])> = Vec::new();
        let mut push = |name: String, shape: [usize; 2]| {
            specs.push((name, shape));
            specs.len() - 1
        };
        let tok_emb = push("tok_emb".into(), [cfg.vocab_size, d]);
        let pos_emb = push("pos_emb".into(), [cfg.max_seq_len, d]);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("blocks.{l}");
            blocks.push(BlockLayout {
                ln1_gain: push(format!("{p}.ln1.gain"), [1, d]),
                ln1_bias: push(format!("{p}.ln1.bias"), [1, d]),
                wq: push(format!("{p}.attn.wq"), [d, d]),
                wk: push(format!("{p}.attn.wk"), [d, d]),
                wv: push(format!("{p}.attn.wv"), [d, d]),
                wo: push(format!("{p}.attn.wo"), [d, d]),
                ln2_gain: push(format!("{p}.ln2.gain"), [1, d]),
                ln2_bias: push(format!("{p}.ln2.bias"), [1, d]),
                w1: push(format!("{p}.mlp.w1"), [d, h]),
                b1: push(format!("{p}.mlp.b1"), [1, h]),
                w2: push(format!("{p}.mlp.w2"), [h, d]),
                b2: push(format!("{p}.mlp.b2"), [1, d]),
            });
        }
        let lnf_gain = push("ln_f.gain".into(), [1, d]);
        let lnf_bias = push("ln_f.bias".into(), [1, d]);
        let w_dec = push("w_dec".into(), [d, cfg.vocab_size]);
        (
            specs,
            Layout {
                tok_emb,
                pos_emb,
                blocks,
                lnf_gain,
                lnf_bias,
                w_dec,
            },
        )
    }
}

/// All trainable tensors, stored in a fixed order so a tensor's index is
/// its [`crate::tensor::ParamId`] in every graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

impl ModelParams {
    /// Random initialization: embeddings and projections ~ N(0, 1/fan_in),
    /// residual output projections further scaled by `1/sqrt(2 L)`, unit
    /// layer-norm gains.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = Layout::build(&config);
        let resid_scale = 1.0 / ((2 * config.layers) as f64).sqrt();
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, [r, c]) in specs {
            let data: Vec<f64> = if name.ends_with(".gain") {
                vec![1.0; r * c]
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                vec![0.0; r * c]
            } else {
                let fan_in = if name.ends_with("_emb") { c } else { r };
                let mut std = 1.0 / (fan_in as f64).sqrt();
                if name == "pos_emb" {
                    std *= 0.5;
                }
                if name.ends_with(".wo") || name.ends_with(".w2") {
                    std *= resid_scale;
                }
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..r * c).map(|_| normal.sample(rng)).collect()
            };
            names.push(name);
            tensors.push(Tensor::new(vec![r, c], data)?);
        }
        Ok(Self {
            config,
            names,
            tensors,
            layout,
        })
    }

    /// Reassembles parameters from named tensors (any order).
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = Layout::build(&config);
        let mut by_name: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(name));
            }
            names.push(name);
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            config,
            names,
            tensors,
            layout,
        })
    }

    /// Same architecture with replacement tensors, in storage order.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len()
            || tensors.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("replacement tensors do not match the layout".into()));
        }
        Ok(Self {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors,
            layout: self.layout.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn embedding(&self) -> &Tensor {
        &self.tensors[self.layout.tok_emb]
    }

    pub fn decode_matrix(&self) -> &Tensor {
        &self.tensors[self.layout.w_dec]
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn t(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    /// `x E` for a sequence of one-hot tokens: row `t` is row `ids[t]` of `E`.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        let e = self.embedding();
        let d = self.config.embed_dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
            data.extend_from_slice(e.row_slice(id));
        }
        Ok(Tensor::new(vec![ids.len(), d], data)?)
    }

    /// Mixture embedding `p E` of a distribution over the vocabulary.
    pub fn embed_distribution(&self, p: &[f64]) -> Result<Tensor> {
        if p.len() != self.config.vocab_size {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "embed_distribution",
                lhs: vec![1, p.len()],
                rhs: self.embedding().shape().to_vec(),
            }));
        }
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotADistribution { sum });
        }
        Ok(Tensor::row(mix_rows(p, self.embedding())))
    }

    /// Logits `h W_d` for one output row.
    pub fn decode_logits(&self, h_row: &[f64]) -> Vec<f64> {
        let w = self.decode_matrix();
        let mut out = vec![0.0; self.config.vocab_size];
        crate::tensor::matmul_into(h_row, w.data(), &mut out, 1, h_row.len(), w.cols());
        out
    }
}

/// `sum_i p_i E_i`, accumulated row by row in index order.
pub(crate) fn mix_rows(p: &[f64], e: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; e.cols()];
    for (i, &w) in p.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(e.row_slice(i)) {
            *o += w * v;
        }
    }
    out
}

/// Next-token distribution at temperature `tau`. `tau = 0` is the one-hot
/// argmax with ties broken toward the lowest index. `-inf` logits are
/// treated as masked.
pub fn next_token_probs(logits: &[f64], tau: Temperature) -> Result<Vec<f64>> {
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY)
        || logits.iter().all(|v| *v == f64::NEG_INFINITY)
    {
        return Err(Error::NonFinite("logits".into()));
    }
    if tau.is_zero() {
        let mut p = vec![0.0; logits.len()];
        p[argmax(logits)] = 1.0;
        return Ok(p);
    }
    let mut p: Vec<f64> = logits.iter().map(|v| v / tau.value()).collect();
    softmax_in_place(&mut p);
    Ok(p)
}

/// `sqrt(mean_i ||E_i||^2)` over embedding rows.
pub fn rms_embedding_norm(e: &Tensor) -> f64 {
    let rows = e.rows().max(1);
    (e.sq_norm() / rows as f64).sqrt()
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|v| **v > 0.0).fold(0.0, |h, v| h - v * v.ln())
}
