//! Spatial self-attention, time-distance scaled temporal self-attention,
//! causal masking, and encoder-decoder cross-attention, all multi-head.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, MASK_VALUE};

/// Time-distance scaling of attention scores for one clip:
/// `omega[i][j] = 1 / (1 + exp(alpha * |t_i - t_j| - beta))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeScaleMatrix {
    len: usize,
    omega: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl TimeScaleMatrix {
    pub fn new(timestamps: &[f64], alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::config(format!("alpha must be non-negative, got {alpha}")));
        }
        let len = timestamps.len();
        let mut omega = Vec::with_capacity(len * len);
        for &ti in timestamps {
            for &tj in timestamps {
                omega.push(logistic_decay((ti - tj).abs(), alpha, beta));
            }
        }
        Ok(Self {
            len,
            omega,
            alpha,
            beta,
        })
    }

    /// All-ones matrix, which turns time-aware attention into plain attention.
    pub fn ones(len: usize) -> Self {
        Self {
            len,
            omega: vec![1.0; len * len],
            alpha: 0.0,
            beta: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.omega[i * self.len + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.omega
    }
}

pub fn logistic_decay(dt: f64, alpha: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (alpha * dt - beta).exp())
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

/// Query, key, value, and output projections of one multi-head attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Projected output, same shape as the layer input.
    pub out: Var,
    /// Post-softmax attention weights `[..., heads, queries, keys]`.
    pub weights: Var,
}

pub(crate) fn check_heads(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::config(format!(
            "embedding width {d_model} is not divisible by {heads} heads"
        )));
    }
    Ok(d_model / heads)
}

/// `[..., T, d]` → `[..., Z, T, d/Z]`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    let d = shape[rank - 1];
    let head_dim = check_heads(d, heads)?;
    let mut split = shape[..rank - 1].to_vec();
    split.extend([heads, head_dim]);
    let x = g.reshape(x, &split)?;
    g.transpose(x, rank - 2, rank - 1)
}

/// `[..., Z, T, d/Z]` → `[..., T, d]`
fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    let x = g.transpose(x, rank - 3, rank - 2)?;
    let mut merged = shape[..rank - 3].to_vec();
    merged.extend([shape[rank - 2], shape[rank - 3] * shape[rank - 1]]);
    g.reshape(x, &merged)
}

/// `softmax((q k^T) * omega / sqrt(head_dim) + mask) v` over the last two axes.
///
/// `omega` and `mask` are constants broadcastable to the score shape
/// `[..., queries, keys]`; the mask is additive.
pub fn scaled_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    omega: Option<&Tensor>,
    mask: Option<&Tensor>,
) -> Result<AttentionOutput> {
    let rank = g.shape(q).len();
    let head_dim = g.shape(q)[rank - 1];
    let kt = g.transpose(k, rank - 2, rank - 1)?;
    let mut scores = g.matmul(q, kt)?;
    if let Some(w) = omega {
        let w = g.constant(w.clone());
        scores = g.mul(scores, w)?;
    }
    scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
    if let Some(m) = mask {
        let m = g.constant(m.clone());
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax(scores, rank - 1)?;
    let out = g.matmul(weights, v)?;
    Ok(AttentionOutput { out, weights })
}

/// Additive mask `[queries, queries * group]` letting query `i` see key
/// groups `j <= i`.
pub fn causal_mask(queries: usize, group: usize) -> Tensor {
    Tensor::from_fn(&[queries, queries * group], |idx| {
        let (i, key) = (idx / (queries * group), idx % (queries * group));
        if key / group > i {
            MASK_VALUE
        } else {
            0.0
        }
    })
}

/// Multi-head self-attention over the second-to-last axis of `x: [..., T, d]`.
///
/// `omega` and `mask` broadcast against per-head scores `[..., Z, T, T]`.
pub fn multi_head_self_attention(
    g: &mut Graph,
    x: Var,
    params: &AttentionParams,
    heads: usize,
    omega: Option<&Tensor>,
    mask: Option<&Tensor>,
) -> Result<AttentionOutput> {
    let q = params.query.apply(g, x)?;
    let k = params.key.apply(g, x)?;
    let v = params.value.apply(g, x)?;
    let (q, k, v) = (
        split_heads(g, q, heads)?,
        split_heads(g, k, heads)?,
        split_heads(g, v, heads)?,
    );
    let attn = scaled_attention(g, q, k, v, omega, mask)?;
    let merged = merge_heads(g, attn.out)?;
    let out = params.output.apply(g, merged)?;
    Ok(AttentionOutput {
        out,
        weights: attn.weights,
    })
}

fn rank4(g: &Graph, e: Var, what: &str) -> Result<[usize; 4]> {
    let shape = g.shape(e);
    shape
        .try_into()
        .map_err(|_| Error::contract(format!("{what} expects [B, L, N, d], got {shape:?}")))
}

/// Self-attention among the `N` patch tokens of each image of `e: [B, L, N, d]`.
pub fn spatial_attention(
    g: &mut Graph,
    e: Var,
    params: &AttentionParams,
    heads: usize,
) -> Result<AttentionOutput> {
    rank4(g, e, "spatial attention")?;
    multi_head_self_attention(g, e, params, heads, None, None)
}

/// Stacks per-sample time-scale matrices into a `[B, 1, 1, L, L]` constant.
pub fn omega_tensor(omegas: &[TimeScaleMatrix], len: usize) -> Result<Tensor> {
    if let Some(bad) = omegas.iter().find(|w| w.len() != len) {
        return Err(Error::contract(format!(
            "time-scale matrix is {0}x{0} but the sequence has {len} steps",
            bad.len()
        )));
    }
    let data = omegas.iter().flat_map(|w| w.as_slice().iter().copied()).collect();
    Tensor::new(vec![omegas.len(), 1, 1, len, len], data)
}

/// Time-aware self-attention along the visit axis of `e: [B, L, N, d]`,
/// independently for every patch position. Raw scores are multiplied by the
/// per-sample `omegas` before scaling; with `causal`, step `i` only sees `j <= i`.
pub fn temporal_attention(
    g: &mut Graph,
    e: Var,
    omegas: &[TimeScaleMatrix],
    causal: bool,
    params: &AttentionParams,
    heads: usize,
) -> Result<AttentionOutput> {
    let [b, l, _, _] = rank4(g, e, "temporal attention")?;
    if omegas.len() != b {
        return Err(Error::contract(format!(
            "{} time-scale matrices for a batch of {b}",
            omegas.len()
        )));
    }
    let omega = omega_tensor(omegas, l)?;
    let mask = causal.then(|| causal_mask(l, 1));
    let x = g.transpose(e, 1, 2)?; // [B, N, L, d]
    let attn = multi_head_self_attention(g, x, params, heads, Some(&omega), mask.as_ref())?;
    let out = g.transpose(attn.out, 1, 2)?;
    Ok(AttentionOutput {
        out,
        weights: attn.weights,
    })
}

/// Decoder-to-encoder attention. `dec: [B, L, d]` supplies queries; keys and
/// values come from `enc: [B, L, N_s, d]` flattened over visits and tokens.
/// Decoder position `i` only sees tokens of visits `j <= i`.
pub fn cross_attention(
    g: &mut Graph,
    dec: Var,
    enc: Var,
    params: &AttentionParams,
    heads: usize,
) -> Result<AttentionOutput> {
    let [b, l, n, d] = rank4(g, enc, "cross attention")?;
    if g.shape(dec) != [b, l, d] {
        return Err(Error::shape("cross attention", g.shape(dec), &[b, l, d]));
    }
    let memory = g.reshape(enc, &[b, l * n, d])?;
    let q = params.query.apply(g, dec)?;
    let k = params.key.apply(g, memory)?;
    let v = params.value.apply(g, memory)?;
    let (q, k, v) = (
        split_heads(g, q, heads)?,
        split_heads(g, k, heads)?,
        split_heads(g, v, heads)?,
    );
    let mask = causal_mask(l, n);
    let attn = scaled_attention(g, q, k, v, None, Some(&mask))?;
    let merged = merge_heads(g, attn.out)?;
    let out = params.output.apply(g, merged)?;
    Ok(AttentionOutput {
        out,
        weights: attn.weights,
    })
}
