//! Full forecaster: embedding → distilling encoder → one-shot generative
//! decoder → linear projection.
//!
//! The decoder input is the last `label_len` rows of the encoder window
//! followed by `pred_len` zero rows; all `pred_len` outputs come out of a
//! single decoder pass.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{init_multi_head, multi_head_graph, AttentionConfig, AttentionKind, ForwardCtx, DEFAULT_SPARSITY};
use crate::data::{Task, WindowSample, WindowSpec};
use crate::embedding::{embed_graph, init_embedding};
use crate::encoder::{
    encoder_graph, feed_forward_graph, init_encoder, init_feed_forward, init_layer_norm, residual_sublayer, DistillKind,
    EncoderConfig,
};
use crate::error::{Error, Result};
use crate::graph::{ForwardStats, Graph, Var};
use crate::tensor::{ParamStore, Tensor};

/// Which of the three model changes are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Variant {
    /// Gated time embedding (E).
    pub embedding: bool,
    /// Parallel pooling distilling (D).
    pub distill: bool,
    /// NeuralSparse attention (N).
    pub neural: bool,
}

impl Variant {
    pub const NONE: Variant = Variant::new(false, false, false);
    pub const FULL: Variant = Variant::new(true, true, true);

    pub const fn new(embedding: bool, distill: bool, neural: bool) -> Self {
        Variant { embedding, distill, neural }
    }

    /// Every on/off combination in ablation-table order.
    pub const ALL: [Variant; 8] = [
        Variant::new(false, false, false),
        Variant::new(true, false, false),
        Variant::new(false, true, false),
        Variant::new(false, false, true),
        Variant::new(true, true, false),
        Variant::new(true, false, true),
        Variant::new(false, true, true),
        Variant::new(true, true, true),
    ];

    pub fn name(self) -> &'static str {
        match (self.embedding, self.distill, self.neural) {
            (false, false, false) => "none",
            (true, false, false) => "M0",
            (false, true, false) => "M1",
            (false, false, true) => "M2",
            (true, true, false) => "M3",
            (true, false, true) => "M4",
            (false, true, true) => "M5",
            (true, true, true) => "full",
        }
    }

    pub fn from_name(name: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(name))
    }

    /// Components switched on, e.g. `"E+N"`.
    pub fn components(self) -> String {
        let parts: Vec<&str> = [(self.embedding, "E"), (self.distill, "D"), (self.neural, "N")]
            .into_iter()
            .filter_map(|(on, s)| on.then_some(s))
            .collect();
        if parts.is_empty() {
            String::from("-")
        } else {
            parts.join("+")
        }
    }

    pub fn encoder_attention(self) -> AttentionKind {
        if self.neural {
            AttentionKind::NeuralSparse
        } else {
            AttentionKind::ProbSparse
        }
    }

    pub fn decoder_self_attention(self) -> AttentionKind {
        if self.neural {
            AttentionKind::MaskedNeuralSparse
        } else {
            AttentionKind::MaskedProbSparse
        }
    }

    pub fn distill_kind(self) -> DistillKind {
        if self.distill {
            DistillKind::Higenet
        } else {
            DistillKind::InformerMaxpool
        }
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    /// Input dimensionality.
    pub d_x: usize,
    /// Output dimensionality.
    pub d_y: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Sparsity factor `c`.
    pub c: usize,
    /// Encoder window length `L_x`.
    pub input_len: usize,
    /// Rows skipped between the window end and the forecast block.
    pub gap: usize,
    /// Known rows fed to the decoder ahead of the placeholders.
    pub label_len: usize,
    /// Forecast horizon `L_y`.
    pub pred_len: usize,
    pub variant: Variant,
    pub post_norm: bool,
    pub dropout: f64,
    pub normalize_cumsum: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_x: 1,
            d_y: 1,
            d_model: 512,
            n_heads: 8,
            enc_blocks: 3,
            dec_blocks: 1,
            c: DEFAULT_SPARSITY,
            input_len: 96,
            gap: 0,
            label_len: 48,
            pred_len: 24,
            variant: Variant::FULL,
            post_norm: true,
            dropout: 0.05,
            normalize_cumsum: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_y == 0 {
            return Err(Error::invalid("d_x and d_y must be positive"));
        }
        if self.input_len == 0 || self.pred_len == 0 {
            return Err(Error::invalid("input_len and pred_len must be positive"));
        }
        if self.label_len > self.input_len {
            return Err(Error::invalid(format!(
                "label_len {} exceeds input_len {}",
                self.label_len, self.input_len
            )));
        }
        if self.dec_blocks == 0 {
            return Err(Error::invalid("decoder needs at least one block"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        self.encoder().validate()?;
        let mut l = self.input_len;
        for _ in 1..self.enc_blocks {
            if l < 2 {
                return Err(Error::CannotDistill);
            }
            l = l.div_ceil(2);
        }
        Ok(())
    }

    fn attention(&self, kind: AttentionKind) -> AttentionConfig {
        AttentionConfig {
            n_heads: self.n_heads,
            d_model: self.d_model,
            c: self.c,
            kind,
            normalize_cumsum: self.normalize_cumsum,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            n_blocks: self.enc_blocks,
            distill: self.variant.distill_kind(),
            attention: self.attention(self.variant.encoder_attention()),
            post_norm: self.post_norm,
        }
    }

    pub fn decoder_self(&self) -> AttentionConfig {
        self.attention(self.variant.decoder_self_attention())
    }

    pub fn decoder_cross(&self) -> AttentionConfig {
        self.attention(AttentionKind::Canonical)
    }

    pub fn decoder_len(&self) -> usize {
        self.label_len + self.pred_len
    }

    pub fn window_spec(&self, task: Task) -> WindowSpec {
        WindowSpec {
            input_len: self.input_len,
            label_len: self.label_len,
            pred_len: self.pred_len,
            gap: self.gap,
            task,
        }
    }
}

/// `[last label_len rows of x_enc ; pred_len zero rows]`.
pub fn build_decoder_input(x_enc: &Tensor, label_len: usize, pred_len: usize) -> Result<Tensor> {
    let (l, d) = x_enc.dims2()?;
    if label_len > l {
        return Err(Error::invalid(format!("label_len {label_len} exceeds window length {l}")));
    }
    if label_len + pred_len == 0 {
        return Err(Error::invalid("empty decoder input"));
    }
    let mut data = Vec::with_capacity((label_len + pred_len) * d);
    data.extend_from_slice(&x_enc.data()[(l - label_len) * d..]);
    data.resize((label_len + pred_len) * d, 0.0);
    Tensor::new(&[label_len + pred_len, d], data)
}

/// Registers all parameters for `cfg`, initialized from `rng`.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    init_embedding(&mut store, "enc.embed", cfg.d_x, d, rng)?;
    init_encoder(&mut store, "enc", &cfg.encoder(), rng)?;
    init_embedding(&mut store, "dec.embed", cfg.d_y, d, rng)?;
    for b in 0..cfg.dec_blocks {
        let p = format!("dec.block{b}");
        init_multi_head(&mut store, &format!("{p}.self"), &cfg.decoder_self(), rng)?;
        init_layer_norm(&mut store, &format!("{p}.ln1"), d)?;
        init_multi_head(&mut store, &format!("{p}.cross"), &cfg.decoder_cross(), rng)?;
        init_layer_norm(&mut store, &format!("{p}.ln2"), d)?;
        init_feed_forward(&mut store, &format!("{p}.ff"), d, rng)?;
        init_layer_norm(&mut store, &format!("{p}.ln3"), d)?;
    }
    store.insert("proj.weight", Tensor::uniform(&[d, cfg.d_y], libm::sqrt(1.0 / d as f64), rng))?;
    store.insert("proj.bias", Tensor::zeros(&[cfg.d_y]))?;
    Ok(store)
}

fn decoder_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
    x: Var,
    memory: Var,
) -> Result<Var> {
    g.stats.decoder_passes += 1;
    let self_cfg = cfg.decoder_self();
    let cross_cfg = cfg.decoder_cross();
    let mut h = x;
    for b in 0..cfg.dec_blocks {
        let p = format!("dec.block{b}");
        let sp = format!("{p}.self");
        h = residual_sublayer(g, store, &format!("{p}.ln1"), cfg.post_norm, ctx, h, |g, ctx, q| {
            multi_head_graph(g, store, &sp, q, q, &self_cfg, &mut *ctx.rng)
        })?;
        let cp = format!("{p}.cross");
        h = residual_sublayer(g, store, &format!("{p}.ln2"), cfg.post_norm, ctx, h, |g, ctx, q| {
            multi_head_graph(g, store, &cp, q, memory, &cross_cfg, &mut *ctx.rng)
        })?;
        let fp = format!("{p}.ff");
        h = residual_sublayer(g, store, &format!("{p}.ln3"), cfg.post_norm, ctx, h, |g, _, q| {
            feed_forward_graph(g, store, &fp, q)
        })?;
    }
    Ok(h)
}

/// Forward pass on the tape; returns the `[pred_len × d_y]` forecast.
pub fn forward_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
    sample: &WindowSample,
) -> Result<Var> {
    if sample.enc_values.shape() != [cfg.input_len, cfg.d_x] {
        return Err(Error::shape("encoder window", sample.enc_values.shape(), &[cfg.input_len, cfg.d_x]));
    }
    if sample.enc_targets.shape() != [cfg.input_len, cfg.d_y] {
        return Err(Error::shape("encoder targets", sample.enc_targets.shape(), &[cfg.input_len, cfg.d_y]));
    }
    if sample.dec_stamps.len() != cfg.decoder_len() {
        return Err(Error::shape("decoder stamps", &[sample.dec_stamps.len()], &[cfg.decoder_len()]));
    }
    let gated = cfg.variant.embedding;
    let xe = g.constant(sample.enc_values.clone());
    let e = embed_graph(g, store, "enc.embed", xe, &sample.enc_stamps, gated)?;
    let e = ctx.dropout(g, e)?;
    let memory = encoder_graph(g, store, "enc", &cfg.encoder(), ctx, e)?;

    let xd = g.constant(build_decoder_input(&sample.enc_targets, cfg.label_len, cfg.pred_len)?);
    let d = embed_graph(g, store, "dec.embed", xd, &sample.dec_stamps, gated)?;
    let d = ctx.dropout(g, d)?;
    let h = decoder_graph(g, store, cfg, ctx, d, memory)?;

    let w = g.param(store, "proj.weight")?;
    let b = g.param(store, "proj.bias")?;
    let tail = g.slice_rows(h, cfg.label_len, cfg.pred_len)?;
    let y = g.matmul(tail, w)?;
    g.add_row(y, b)
}

/// Mean squared error over all entries.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Output of one evaluation-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// `[pred_len × d_y]`
    pub values: Tensor,
    pub stats: ForwardStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh model with parameters drawn from a ChaCha8 stream seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &mut rng)?;
        Ok(Model { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against a
    /// fresh initialization of `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = init_params(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if reference.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                reference.len(),
                params.len()
            )));
        }
        for (name, t) in reference.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    /// Evaluation-mode forecast (no dropout).
    pub fn forecast(&self, sample: &WindowSample, rng: &mut dyn RngCore) -> Result<Forecast> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval(rng);
        let y = forward_graph(&mut g, &self.params, &self.config, &mut ctx, sample)?;
        Ok(Forecast {
            values: g.value(y).clone(),
            stats: g.stats.clone(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }
}
