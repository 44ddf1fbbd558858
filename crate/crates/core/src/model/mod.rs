//! Multi-scale spatio-temporal encoder-decoder.
//!
//! Encoder tokens pass through per-scale blocks of spatial then time-aware
//! temporal attention and are merged `gamma x gamma` between scales. The
//! decoder stream starts from label embeddings, attends causally over time
//! and into the encoder tokens of each scale, and the decoder outputs of all
//! scales are summed before a linear classifier. Logits at position `i`
//! forecast the label of visit `i + 1`.

mod config;
mod params;

pub use config::{Ablation, ModelConfig};
pub use params::{param_specs, BoundParams, ModelParams, ParamSpec};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cross_attention, spatial_attention, temporal_attention, Linear, TimeScaleMatrix,
};
use crate::encoding::{
    group_blocks, label_embed, patch_embed, standardize_images, stp_encode_batch, time_encode_batch,
    ClipBatch,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Per-forward state shared by all blocks.
pub struct BlockContext<'a> {
    pub config: &'a ModelConfig,
    pub omegas: Vec<TimeScaleMatrix>,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> BlockContext<'a> {
    pub fn new(config: &'a ModelConfig, timestamps: &[Vec<f64>]) -> Result<Self> {
        let omegas = timestamps
            .iter()
            .map(|ts| {
                if config.use_time_scaling {
                    TimeScaleMatrix::new(ts, config.alpha, config.beta)
                } else {
                    Ok(TimeScaleMatrix::ones(ts.len()))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            omegas,
            dropout_rng: None,
        })
    }

    /// Enables dropout (when the configured rate is non-zero).
    pub fn with_dropout(mut self, rng: &'a mut ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let rate = self.config.dropout;
        let Some(rng) = self.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = Tensor::from_fn(g.shape(x), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let mask = g.constant(mask);
        g.mul(x, mask)
    }
}

fn norm(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let (gamma, beta) = p.norm(prefix)?;
    g.layer_norm(x, gamma, beta)
}

fn feed_forward(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = p.linear(&format!("{prefix}.fc1"))?.apply(g, x)?;
    let h = g.gelu(h);
    p.linear(&format!("{prefix}.fc2"))?.apply(g, h)
}

/// `x + dropout(f(norm(x)))`
fn residual(
    g: &mut Graph,
    ctx: &mut BlockContext<'_>,
    p: &BoundParams,
    norm_prefix: &str,
    x: Var,
    f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let h = norm(g, p, norm_prefix, x)?;
    let h = f(g, h)?;
    let h = ctx.dropout(g, h)?;
    g.add(x, h)
}

/// One encoder block on `tokens: [B, L, N, d]`: pre-norm residual spatial
/// attention, pre-norm residual time-aware temporal attention, then a
/// pre-norm residual feed-forward layer.
pub fn encoder_block(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    tokens: Var,
    ctx: &mut BlockContext<'_>,
) -> Result<Var> {
    let heads = ctx.config.heads;
    let causal = ctx.config.encoder_causal;
    let spatial = p.attention(&format!("{prefix}.spatial"))?;
    let temporal = p.attention(&format!("{prefix}.temporal"))?;
    let x = residual(g, ctx, p, &format!("{prefix}.norm1"), tokens, |g, h| {
        Ok(spatial_attention(g, h, &spatial, heads)?.out)
    })?;
    let omegas = ctx.omegas.clone();
    let x = residual(g, ctx, p, &format!("{prefix}.norm2"), x, |g, h| {
        Ok(temporal_attention(g, h, &omegas, causal, &temporal, heads)?.out)
    })?;
    let ff = format!("{prefix}.ff");
    residual(g, ctx, p, &format!("{prefix}.norm3"), x, |g, h| feed_forward(g, p, &ff, h))
}

/// One decoder block on `dec: [B, L, d]` against `enc: [B, L, N_s, d]`:
/// causal time-aware self-attention, causal cross-attention, feed-forward.
pub fn decoder_block(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    dec: Var,
    enc: Var,
    ctx: &mut BlockContext<'_>,
) -> Result<Var> {
    let heads = ctx.config.heads;
    let self_attn = p.attention(&format!("{prefix}.self_attn"))?;
    let cross = p.attention(&format!("{prefix}.cross_attn"))?;
    let omegas = ctx.omegas.clone();
    let y = residual(g, ctx, p, &format!("{prefix}.norm1"), dec, |g, h| {
        let shape = g.shape(h).to_vec();
        let h4 = g.reshape(h, &[shape[0], shape[1], 1, shape[2]])?;
        let out = temporal_attention(g, h4, &omegas, true, &self_attn, heads)?.out;
        g.reshape(out, &shape)
    })?;
    let y = residual(g, ctx, p, &format!("{prefix}.norm2"), y, |g, h| {
        Ok(cross_attention(g, h, enc, &cross, heads)?.out)
    })?;
    let ff = format!("{prefix}.ff");
    residual(g, ctx, p, &format!("{prefix}.norm3"), y, |g, h| feed_forward(g, p, &ff, h))
}

/// Merges every `gamma x gamma` neighbourhood of `tokens: [B, L, h*w, d]`
/// into one token with a learned linear map, returning the coarser grid.
pub fn scale_transition(
    g: &mut Graph,
    tokens: Var,
    grid: (usize, usize),
    gamma: usize,
    merge: &Linear,
) -> Result<(Var, (usize, usize))> {
    let shape = g.shape(tokens).to_vec();
    let [b, l, n, d]: [usize; 4] = shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::contract(format!("tokens must be [B, L, N, d], got {shape:?}")))?;
    let (h, w) = grid;
    if h * w != n {
        return Err(Error::contract(format!("grid {h}x{w} does not hold {n} tokens")));
    }
    if gamma == 0 || h % gamma != 0 || w % gamma != 0 {
        return Err(Error::config(format!(
            "token grid {h}x{w} is not divisible by gamma {gamma}"
        )));
    }
    let grouped = group_blocks(g, tokens, [b, l, h, w, d], gamma)?;
    let merged = merge.apply(g, grouped)?;
    Ok((merged, (h / gamma, w / gamma)))
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, L, k]`
    pub logits: Var,
    /// Decoder output of every scale, `[B, L, d]` each.
    pub decoder_outputs: Vec<Var>,
    /// Encoder token count at every scale.
    pub token_counts: Vec<usize>,
}

fn check_batch(batch: &ClipBatch, cfg: &ModelConfig) -> Result<()> {
    let (h, w, c) = batch.image_dims();
    if (h, w, c) != (cfg.image_height, cfg.image_width, cfg.channels) {
        return Err(Error::config(format!(
            "clip images are {h}x{w}x{c}, model expects {}x{}x{}",
            cfg.image_height, cfg.image_width, cfg.channels
        )));
    }
    let k = cfg.num_classes;
    if batch.input_labels.iter().chain(&batch.target_labels).flatten().any(|&y| y >= k) {
        return Err(Error::data(format!("label outside 0..{k}")));
    }
    Ok(())
}

/// Full forward pass producing per-position logits.
pub fn forward(
    g: &mut Graph,
    p: &BoundParams,
    batch: &ClipBatch,
    cfg: &ModelConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    check_batch(batch, cfg)?;
    let (b, l, d) = (batch.batch_size(), batch.len(), cfg.d_model);
    let mut ctx = BlockContext::new(cfg, &batch.timestamps)?;
    if let Some(rng) = dropout_rng {
        ctx = ctx.with_dropout(rng);
    }

    let images = g.constant(if cfg.standardize_input {
        standardize_images(&batch.images)?
    } else {
        batch.images.clone()
    });
    let grid = patch_embed(g, images, cfg.patch_size, p.var("patch.weight")?, p.var("patch.bias")?)?;
    let mut tokens = grid.tokens;
    let mut dims = (grid.grid_h, grid.grid_w);
    if cfg.use_stp {
        let stp = g.constant(stp_encode_batch(&batch.timestamps, grid.num_tokens(), d)?);
        tokens = g.add(tokens, stp)?;
    }

    let labels = label_embed(g, p.var("label_embed.weight")?, &batch.input_labels)?;
    let time = g.constant(time_encode_batch(&batch.timestamps, d)?);
    let mut dec = g.add(labels, time)?;

    let mut decoder_outputs = Vec::with_capacity(cfg.scales);
    let mut token_counts = Vec::with_capacity(cfg.scales);
    for s in 1..=cfg.scales {
        if s > 1 {
            let merge = p.linear(&format!("scale{s}.merge"))?;
            (tokens, dims) = scale_transition(g, tokens, dims, cfg.gamma, &merge)?;
        }
        token_counts.push(dims.0 * dims.1);
        for blk in 1..=cfg.blocks_per_scale {
            tokens = encoder_block(g, p, &format!("scale{s}.enc{blk}"), tokens, &mut ctx)?;
        }
        let memory = norm(g, p, &format!("scale{s}.enc_norm"), tokens)?;
        for blk in 1..=cfg.blocks_per_scale {
            dec = decoder_block(g, p, &format!("scale{s}.dec{blk}"), dec, memory, &mut ctx)?;
        }
        decoder_outputs.push(dec);
    }

    let mut aggregate = decoder_outputs[0];
    for &y in &decoder_outputs[1..] {
        aggregate = g.add(aggregate, y)?;
    }
    let h = norm(g, p, "head_norm", aggregate)?;
    let logits = p.linear("head")?.apply(g, h)?;
    debug_assert_eq!(g.shape(logits), &[b, l, cfg.num_classes]);
    Ok(ForwardOutput {
        logits,
        decoder_outputs,
        token_counts,
    })
}

/// Logits of the last position, `[B, k]`.
pub fn final_position(g: &mut Graph, logits: Var) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let last = g.slice(logits, 1, shape[1] - 1, shape[1])?;
    g.reshape(last, &[shape[0], shape[2]])
}

/// Forecast class probabilities for the visit after each clip, `[B][k]`.
pub fn predict_next(params: &ModelParams, batch: &ClipBatch, cfg: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = forward(&mut g, &bound, batch, cfg, None)?;
    let last = final_position(&mut g, out.logits)?;
    let probs = g.softmax(last, 1)?;
    let k = cfg.num_classes;
    Ok(g.value(probs).data().chunks(k).map(<[f64]>::to_vec).collect())
}
