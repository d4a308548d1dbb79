//! Single-stack encoder: attention blocks joined by distilling steps that
//! halve the sequence length.
//!
//! A distilling step computes `F = ELU(conv(x))` and returns
//! `MP(F) + γ·AP(F) + DS(x)`, where MP/AP are max/average pooling with
//! kernel 3, stride 2, padding 1 and DS is the same average pooling applied to
//! the block output as a residual path. The baseline variant keeps only
//! `MP(F)`.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::attention::{init_multi_head, multi_head_graph, AttentionConfig, ForwardCtx};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::PoolKind;
use crate::tensor::{ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DistillKind {
    /// Parallel max/γ-weighted average pooling plus down-sampled residual.
    Higenet,
    /// Conv → ELU → max pooling only.
    InformerMaxpool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub distill: DistillKind,
    pub attention: AttentionConfig,
    /// Layer norm after the residual add (otherwise before the sublayer).
    pub post_norm: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::invalid("encoder needs at least one block"));
        }
        self.attention.validate()
    }

    /// Sequence length after every distilling step.
    pub fn output_len(&self, len: usize) -> usize {
        (1..self.n_blocks).fold(len, |l, _| l.div_ceil(2))
    }
}

/// Parameters of one distilling step.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillParams {
    /// `[d_model × d_model × 3]`
    pub kernel: Tensor,
    /// `[d_model]`
    pub bias: Tensor,
    /// `[1]`
    pub gamma: Tensor,
}

impl DistillParams {
    pub fn init<R: Rng + ?Sized>(d_model: usize, rng: &mut R) -> Self {
        let bound = libm::sqrt(1.0 / (3 * d_model) as f64);
        DistillParams {
            kernel: Tensor::uniform(&[d_model, d_model, 3], bound, rng),
            bias: Tensor::zeros(&[d_model]),
            gamma: Tensor::ones(&[1]),
        }
    }

    /// Kernel whose centre tap copies channel `i` to channel `i`.
    pub fn identity(d_model: usize, gamma: f64) -> Self {
        let mut k = Tensor::zeros(&[d_model, d_model, 3]);
        for i in 0..d_model {
            k.data_mut()[(i * d_model + i) * 3 + 1] = 1.0;
        }
        DistillParams {
            kernel: k,
            bias: Tensor::zeros(&[d_model]),
            gamma: Tensor::full(&[1], gamma),
        }
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.conv.weight"), self.kernel.clone())?;
        store.insert(format!("{prefix}.conv.bias"), self.bias.clone())?;
        store.insert(format!("{prefix}.gamma"), self.gamma.clone())
    }
}

struct DistillVars {
    kernel: Var,
    bias: Var,
    gamma: Var,
}

impl DistillVars {
    fn constants(g: &mut Graph, p: &DistillParams) -> Self {
        DistillVars {
            kernel: g.constant(p.kernel.clone()),
            bias: g.constant(p.bias.clone()),
            gamma: g.constant(p.gamma.clone()),
        }
    }

    fn params(g: &mut Graph, store: &ParamStore, prefix: &str, kind: DistillKind) -> Result<Self> {
        let kernel = g.param(store, &format!("{prefix}.conv.weight"))?;
        let bias = g.param(store, &format!("{prefix}.conv.bias"))?;
        // the baseline has no γ; bind a constant so the struct stays uniform
        let gamma = match kind {
            DistillKind::Higenet => g.param(store, &format!("{prefix}.gamma"))?,
            DistillKind::InformerMaxpool => g.constant(Tensor::zeros(&[1])),
        };
        Ok(DistillVars { kernel, bias, gamma })
    }
}

fn conv_elu(g: &mut Graph, v: &DistillVars, x: Var) -> Result<Var> {
    let c = g.conv1d(x, v.kernel, Some(v.bias), 1)?;
    g.elu(c)
}

fn distill(g: &mut Graph, v: &DistillVars, x: Var, kind: DistillKind) -> Result<Var> {
    if g.value(x).rows() < 2 {
        return Err(Error::CannotDistill);
    }
    let f = conv_elu(g, v, x)?;
    let mp = g.pool1d(f, PoolKind::Max, 3, 2, 1)?;
    match kind {
        DistillKind::InformerMaxpool => Ok(mp),
        DistillKind::Higenet => {
            let ap = g.pool1d(f, PoolKind::Avg, 3, 2, 1)?;
            let ap = g.mul_scalar(ap, v.gamma)?;
            let ds = g.pool1d(x, PoolKind::Avg, 3, 2, 1)?;
            let s = g.add(mp, ap)?;
            g.add(s, ds)
        }
    }
}

/// `F = ELU(conv1d(x))`, length preserving.
pub fn conv_elu_feature(x: &Tensor, params: &DistillParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = DistillVars::constants(&mut g, params);
    let xv = g.constant(x.clone());
    let out = conv_elu(&mut g, &v, xv)?;
    Ok(g.value(out).clone())
}

/// One distilling step; output length is `ceil(L/2)`.
pub fn distill_step(x: &Tensor, params: &DistillParams, kind: DistillKind) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = DistillVars::constants(&mut g, params);
    let xv = g.constant(x.clone());
    let out = distill(&mut g, &v, xv, kind)?;
    Ok(g.value(out).clone())
}

/// Registers layer-norm gain (ones) and bias (zeros).
pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::ones(&[d]))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))
}

pub fn layer_norm_graph(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

/// Position-wise feed-forward with hidden width `4·d_model`.
pub fn init_feed_forward<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    let hidden = 4 * d;
    store.insert(format!("{prefix}.w1"), Tensor::uniform(&[d, hidden], libm::sqrt(1.0 / d as f64), rng))?;
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?;
    store.insert(format!("{prefix}.w2"), Tensor::uniform(&[hidden, d], libm::sqrt(1.0 / hidden as f64), rng))?;
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]))
}

pub fn feed_forward_graph(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.elu(h)?;
    let y = g.matmul(h, w2)?;
    g.add_row(y, b2)
}

/// Residual wrapper around one sublayer. `post_norm`: `LN(x + drop(f(x)))`;
/// otherwise `x + drop(f(LN(x)))`.
pub fn residual_sublayer<F>(
    g: &mut Graph,
    store: &ParamStore,
    ln_prefix: &str,
    post_norm: bool,
    ctx: &mut ForwardCtx<'_>,
    x: Var,
    f: F,
) -> Result<Var>
where
    F: FnOnce(&mut Graph, &mut ForwardCtx<'_>, Var) -> Result<Var>,
{
    let input = if post_norm { x } else { layer_norm_graph(g, store, ln_prefix, x)? };
    let y = f(g, ctx, input)?;
    let y = ctx.dropout(g, y)?;
    let s = g.add(x, y)?;
    if post_norm {
        layer_norm_graph(g, store, ln_prefix, s)
    } else {
        Ok(s)
    }
}

/// Self-attention + feed-forward block.
pub fn init_attention_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut R) -> Result<()> {
    init_multi_head(store, &format!("{prefix}.attn"), cfg, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln1"), cfg.d_model)?;
    init_feed_forward(store, &format!("{prefix}.ff"), cfg.d_model, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), cfg.d_model)
}

pub fn attention_block_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    post_norm: bool,
    ctx: &mut ForwardCtx<'_>,
    x: Var,
) -> Result<Var> {
    let attn = format!("{prefix}.attn");
    let x = residual_sublayer(g, store, &format!("{prefix}.ln1"), post_norm, ctx, x, |g, ctx, h| {
        multi_head_graph(g, store, &attn, h, h, cfg, &mut *ctx.rng)
    })?;
    let ff = format!("{prefix}.ff");
    residual_sublayer(g, store, &format!("{prefix}.ln2"), post_norm, ctx, x, |g, _, h| {
        feed_forward_graph(g, store, &ff, h)
    })
}

pub fn init_encoder<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.attention.d_model;
    for b in 0..cfg.n_blocks {
        init_attention_block(store, &format!("{prefix}.block{b}"), &cfg.attention, rng)?;
        if b + 1 < cfg.n_blocks {
            let p = format!("{prefix}.distill{b}");
            let params = DistillParams::init(d, rng);
            match cfg.distill {
                DistillKind::Higenet => params.register(store, &p)?,
                DistillKind::InformerMaxpool => {
                    store.insert(format!("{p}.conv.weight"), params.kernel)?;
                    store.insert(format!("{p}.conv.bias"), params.bias)?;
                }
            }
        }
    }
    Ok(())
}

/// `AB₁ → distill → AB₂ → … → AB_n` on the tape.
pub fn encoder_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    ctx: &mut ForwardCtx<'_>,
    x: Var,
) -> Result<Var> {
    cfg.validate()?;
    let mut h = x;
    for b in 0..cfg.n_blocks {
        h = attention_block_graph(g, store, &format!("{prefix}.block{b}"), &cfg.attention, cfg.post_norm, ctx, h)?;
        if b + 1 < cfg.n_blocks {
            let v = DistillVars::params(g, store, &format!("{prefix}.distill{b}"), cfg.distill)?;
            h = distill(g, &v, h, cfg.distill)?;
        }
    }
    Ok(h)
}

/// Encoder forward pass in evaluation mode.
pub fn encoder_forward(
    x_embed: &Tensor,
    cfg: &EncoderConfig,
    store: &ParamStore,
    prefix: &str,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x_embed.clone());
    let mut ctx = ForwardCtx::eval(rng);
    let out = encoder_graph(&mut g, store, prefix, cfg, &mut ctx, x)?;
    Ok(g.value(out).clone())
}

/// Lengths seen by each block, for inspection.
pub fn block_lengths(cfg: &EncoderConfig, len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(cfg.n_blocks);
    let mut l = len;
    for b in 0..cfg.n_blocks {
        out.push(l);
        if b + 1 < cfg.n_blocks {
            l = l.div_ceil(2);
        }
    }
    out
}
