//! Attention kernels.
//!
//! Four families share one calling convention, per head, on time-major
//! `[L × d]` matrices:
//!
//! * canonical scaled dot-product attention (optionally causal);
//! * NeuralSparse: a width-3 convolution over `Q + K` scores every query,
//!   the top `n = ceil(c·ln L)` queries per head get full attention and the
//!   remaining ("lazy") rows are filled with the mean of `V`;
//! * masked NeuralSparse: selected rows attend causally, lazy rows take the
//!   inclusive prefix sum of `V`;
//! * ProbSparse: queries are ranked by the max-minus-mean of their scores
//!   against a random key sample.
//!
//! Each kernel reports a [`ScoreBudget`] counting the query–key dot products
//! it actually materialized. The plain-tensor kernels are what the
//! benchmark harness times; [`multi_head_graph`] expresses the same
//! computation on the tape for training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{self, dot};
use crate::tensor::{ParamStore, Tensor};

pub const DEFAULT_SPARSITY: usize = 5;
const F64_BYTES: u64 = core::mem::size_of::<f64>() as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttentionKind {
    Canonical,
    NeuralSparse,
    MaskedNeuralSparse,
    ProbSparse,
    MaskedProbSparse,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Canonical => "canonical",
            AttentionKind::NeuralSparse => "neural_sparse",
            AttentionKind::MaskedNeuralSparse => "masked_neural_sparse",
            AttentionKind::ProbSparse => "prob_sparse",
            AttentionKind::MaskedProbSparse => "masked_prob_sparse",
        }
    }

    pub fn is_masked(self) -> bool {
        matches!(self, AttentionKind::MaskedNeuralSparse | AttentionKind::MaskedProbSparse)
    }

    pub fn uses_importance_conv(self) -> bool {
        matches!(self, AttentionKind::NeuralSparse | AttentionKind::MaskedNeuralSparse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_model: usize,
    /// Sparsity factor `c` in `n = ceil(c·ln L)`.
    pub c: usize,
    pub kind: AttentionKind,
    /// Divide the masked lazy fill by the number of accumulated rows
    /// (running mean instead of raw prefix sum).
    #[cfg_attr(feature = "serde", serde(default))]
    pub normalize_cumsum: bool,
}

impl AttentionConfig {
    pub fn new(n_heads: usize, d_model: usize, kind: AttentionKind) -> Self {
        AttentionConfig {
            n_heads,
            d_model,
            c: DEFAULT_SPARSITY,
            kind,
            normalize_cumsum: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.c < 1 {
            return Err(Error::invalid("sparsity factor c must be at least 1"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Work actually done by an attention call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScoreBudget {
    /// Query–key dot products materialized, sampling included.
    pub dot_products: u64,
    /// The subset of `dot_products` spent on ProbSparse key sampling.
    pub sampled_dot_products: u64,
    /// Queries that received full attention.
    pub rows_selected: u64,
    /// Importance-convolution passes over the sequence.
    pub conv_passes: u64,
    /// Largest score matrix held at one time, in bytes.
    pub peak_score_bytes: u64,
}

impl ScoreBudget {
    pub fn merge(&mut self, other: &ScoreBudget) {
        self.dot_products += other.dot_products;
        self.sampled_dot_products += other.sampled_dot_products;
        self.rows_selected += other.rows_selected;
        self.conv_passes += other.conv_passes;
        self.peak_score_bytes = self.peak_score_bytes.max(other.peak_score_bytes);
    }
}

/// How lazy (unselected) query rows are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LazyFill {
    /// Column mean of `V`.
    Mean,
    /// Inclusive prefix sum of `V` rows.
    Cumsum,
    /// Prefix sum divided by the number of rows summed.
    RunningMean,
}

/// Number of queries kept out of `len`: `min(len, max(1, ceil(c·ln len)))`.
pub fn top_n(len: usize, c: usize) -> usize {
    if len <= 1 {
        return len;
    }
    let raw = libm::ceil(c as f64 * libm::log(len as f64));
    (raw as usize).clamp(1, len)
}

/// Indices (ascending) of the `top_n(len, c)` largest scores. Ties go to the
/// lower index.
pub fn select_top_queries(scores: &[f64], c: usize) -> Vec<usize> {
    let n = top_n(scores.len(), c);
    top_k_indices(scores, n)
}

fn top_k_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if n < idx.len() {
        idx.select_nth_unstable_by(n, order);
        idx.truncate(n);
    }
    idx.sort_unstable();
    idx
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let (lq, d) = q.dims2()?;
    let (lk, dk) = k.dims2()?;
    let (lv, _) = v.dims2()?;
    if d != dk {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    if lk != lv {
        return Err(Error::shape("attention k/v", k.shape(), v.shape()));
    }
    Ok((lq, lk, d))
}

fn inv_sqrt(d: usize) -> f64 {
    1.0 / libm::sqrt(d as f64)
}

/// Attends the query rows `rows` (query `i` at position `rows[r]`) over every
/// key, writing into `out` at those positions. Returns the budget.
fn attend_rows(q: &Tensor, k: &Tensor, v: &Tensor, rows: &[usize], causal: bool, out: &mut [f64]) -> Result<ScoreBudget> {
    let (_, lk, d) = check_qkv(q, k, v)?;
    let dv = v.cols();
    let scale = inv_sqrt(d);
    let kd = k.data();
    let vd = v.data();
    let mut scores = vec![0.0; rows.len() * lk];
    for (r, &i) in rows.iter().enumerate() {
        let qi = q.row(i);
        let srow = &mut scores[r * lk..(r + 1) * lk];
        for (j, s) in srow.iter_mut().enumerate() {
            *s = dot(qi, &kd[j * d..(j + 1) * d]) * scale;
        }
        ops::softmax_row(srow, |j| !causal || j <= i).map_err(|_| Error::EmptyAttentionRow { row: i })?;
        let orow = &mut out[i * dv..(i + 1) * dv];
        orow.iter_mut().for_each(|x| *x = 0.0);
        for (j, &a) in srow.iter().enumerate() {
            if a != 0.0 {
                ops::axpy(a, &vd[j * dv..(j + 1) * dv], orow);
            }
        }
    }
    Ok(ScoreBudget {
        dot_products: (rows.len() * lk) as u64,
        sampled_dot_products: 0,
        rows_selected: rows.len() as u64,
        conv_passes: 0,
        peak_score_bytes: (rows.len() * lk) as u64 * F64_BYTES,
    })
}

/// `softmax(QKᵀ/√d)·V`, causal when requested (requires `L_Q = L_K`).
pub fn canonical_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    Ok(canonical_attention_budgeted(q, k, v, causal)?.0)
}

pub fn canonical_attention_budgeted(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<(Tensor, ScoreBudget)> {
    let (lq, lk, _) = check_qkv(q, k, v)?;
    if causal && lq != lk {
        return Err(Error::shape("causal attention", q.shape(), k.shape()));
    }
    let dv = v.cols();
    let mut out = vec![0.0; lq * dv];
    let rows: Vec<usize> = (0..lq).collect();
    let budget = attend_rows(q, k, v, &rows, causal, &mut out)?;
    Ok((Tensor::new(&[lq, dv], out)?, budget))
}

/// Writes the lazy fill for every row of a `[L × dv]` output.
fn lazy_fill(v: &Tensor, fill: LazyFill, out: &mut [f64]) {
    let (l, dv) = (v.rows(), v.cols());
    let vd = v.data();
    match fill {
        LazyFill::Mean => {
            let mut mean = vec![0.0; dv];
            for r in vd.chunks(dv) {
                ops::axpy(1.0, r, &mut mean);
            }
            mean.iter_mut().for_each(|m| *m /= l as f64);
            for r in out.chunks_mut(dv) {
                r.copy_from_slice(&mean);
            }
        }
        LazyFill::Cumsum | LazyFill::RunningMean => {
            let mut acc = vec![0.0; dv];
            for (i, r) in out.chunks_mut(dv).enumerate() {
                ops::axpy(1.0, &vd[i * dv..(i + 1) * dv], &mut acc);
                r.copy_from_slice(&acc);
                if fill == LazyFill::RunningMean {
                    let inv = 1.0 / (i + 1) as f64;
                    r.iter_mut().for_each(|x| *x *= inv);
                }
            }
        }
    }
}

/// Weighted aggregation phase shared by the sparse kernels: lazy fill for
/// every row, then full attention for the `selected` rows.
pub fn sparse_aggregate(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    selected: &[usize],
    causal: bool,
    fill: LazyFill,
) -> Result<(Tensor, ScoreBudget)> {
    let (lq, lk, _) = check_qkv(q, k, v)?;
    if lq != lk {
        return Err(Error::shape("sparse self-attention", q.shape(), k.shape()));
    }
    if selected.iter().any(|&i| i >= lq) {
        return Err(Error::invalid("selected query index out of range"));
    }
    let dv = v.cols();
    let mut out = vec![0.0; lq * dv];
    lazy_fill(v, fill, &mut out);
    let budget = attend_rows(q, k, v, selected, causal, &mut out)?;
    Ok((Tensor::new(&[lq, dv], out)?, budget))
}

/// Per-query importance `I(Q) = conv1d(Q + K)`, one column per head.
///
/// `kernel` is `[n_heads × d_model × 3]`, applied with padding 1.
pub fn importance_scores(q: &Tensor, k: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if q.shape() != k.shape() {
        return Err(Error::shape("importance_scores (self-attention only)", q.shape(), k.shape()));
    }
    let sum: Vec<f64> = q.data().iter().zip(k.data()).map(|(a, b)| a + b).collect();
    let x = Tensor::new(q.shape(), sum)?;
    ops::conv1d_time(&x, kernel, bias, 1)
}

/// Extracts column `col` of a matrix.
pub fn column(t: &Tensor, col: usize) -> Vec<f64> {
    let c = t.cols();
    t.data().iter().skip(col).step_by(c).copied().collect()
}

/// NeuralSparse attention for one head, given that head's importance column.
pub fn neural_sparse_attention(q: &Tensor, k: &Tensor, v: &Tensor, head_scores: &[f64], c: usize) -> Result<(Tensor, ScoreBudget)> {
    if head_scores.len() != q.rows() {
        return Err(Error::shape("neural_sparse scores", q.shape(), &[head_scores.len()]));
    }
    let selected = select_top_queries(head_scores, c);
    let (out, mut budget) = sparse_aggregate(q, k, v, &selected, false, LazyFill::Mean)?;
    budget.conv_passes = 1;
    Ok((out, budget))
}

/// Causal NeuralSparse: selected rows attend to keys `j ≤ i`, lazy rows hold
/// the prefix sum of `V` (or its running mean when `normalize` is set).
pub fn masked_neural_sparse_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    head_scores: &[f64],
    c: usize,
    normalize: bool,
) -> Result<(Tensor, ScoreBudget)> {
    if head_scores.len() != q.rows() {
        return Err(Error::shape("neural_sparse scores", q.shape(), &[head_scores.len()]));
    }
    let selected = select_top_queries(head_scores, c);
    let fill = if normalize { LazyFill::RunningMean } else { LazyFill::Cumsum };
    let (out, mut budget) = sparse_aggregate(q, k, v, &selected, true, fill)?;
    budget.conv_passes = 1;
    Ok((out, budget))
}

/// Uniform key sample without replacement, `min(L_K, ceil(c·ln L_K))` keys,
/// in ascending order.
pub fn sample_keys<R: Rng + ?Sized>(len_k: usize, c: usize, rng: &mut R) -> Vec<usize> {
    let u = top_n(len_k, c);
    let mut idx = rand::seq::index::sample(rng, len_k, u).into_vec();
    idx.sort_unstable();
    idx
}

/// Sparsity measurement `M(q) = max_j s_j − mean_j s_j` over the sampled keys.
pub fn sparsity_measure(q: &Tensor, k: &Tensor, sample: &[usize]) -> Result<(Vec<f64>, ScoreBudget)> {
    let (lq, d) = q.dims2()?;
    let (_, dk) = k.dims2()?;
    if d != dk {
        return Err(Error::shape("sparsity_measure", q.shape(), k.shape()));
    }
    if sample.is_empty() {
        return Err(Error::invalid("empty key sample"));
    }
    let scale = inv_sqrt(d);
    let mut m = Vec::with_capacity(lq);
    for i in 0..lq {
        let qi = q.row(i);
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &j in sample {
            let s = dot(qi, k.row(j)) * scale;
            max = max.max(s);
            sum += s;
        }
        m.push(max - sum / sample.len() as f64);
    }
    let n = (lq * sample.len()) as u64;
    Ok((
        m,
        ScoreBudget {
            dot_products: n,
            sampled_dot_products: n,
            peak_score_bytes: 0,
            ..ScoreBudget::default()
        },
    ))
}

/// ProbSparse attention for one head.
pub fn prob_sparse_attention<R: Rng + ?Sized>(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    c: usize,
    masked: bool,
    rng: &mut R,
) -> Result<(Tensor, ScoreBudget)> {
    let (lq, lk, _) = check_qkv(q, k, v)?;
    if lq != lk {
        return Err(Error::shape("prob_sparse self-attention", q.shape(), k.shape()));
    }
    let sample = sample_keys(lk, c, rng);
    let (m, mut budget) = sparsity_measure(q, k, &sample)?;
    let selected = select_top_queries(&m, c);
    let fill = if masked { LazyFill::Cumsum } else { LazyFill::Mean };
    let (out, agg) = sparse_aggregate(q, k, v, &selected, masked, fill)?;
    budget.merge(&agg);
    Ok((out, budget))
}

/// Per-call context for stochastic pieces of a forward pass.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub dropout: f64,
    pub rng: &'a mut dyn RngCore,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(rng: &'a mut dyn RngCore) -> Self {
        ForwardCtx {
            training: false,
            dropout: 0.0,
            rng,
        }
    }

    /// Inverted dropout on the tape; identity outside training.
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.training || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        g.mul_const(x, mask)
    }
}

fn causal_mask(selected: &[usize], lk: usize) -> Vec<bool> {
    let mut mask = vec![false; selected.len() * lk];
    for (r, &i) in selected.iter().enumerate() {
        for j in i + 1..lk {
            mask[r * lk + j] = true;
        }
    }
    mask
}

/// One head on the tape. `head_scores` drives NeuralSparse selection.
fn head_graph(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
    head_scores: Option<&[f64]>,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let (lq, d) = g.value(q).dims2()?;
    let lk = g.value(k).rows();
    let scale = inv_sqrt(d);
    let (selected, fill, mut budget) = match cfg.kind {
        AttentionKind::Canonical => {
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s, None)?;
            g.stats.budget.merge(&ScoreBudget {
                dot_products: (lq * lk) as u64,
                rows_selected: lq as u64,
                peak_score_bytes: (lq * lk) as u64 * F64_BYTES,
                ..ScoreBudget::default()
            });
            return g.matmul(a, v);
        }
        AttentionKind::NeuralSparse | AttentionKind::MaskedNeuralSparse => {
            let scores = head_scores.ok_or_else(|| Error::invalid("NeuralSparse needs importance scores"))?;
            let fill = match (cfg.kind.is_masked(), cfg.normalize_cumsum) {
                (false, _) => LazyFill::Mean,
                (true, false) => LazyFill::Cumsum,
                (true, true) => LazyFill::RunningMean,
            };
            let budget = ScoreBudget {
                conv_passes: 1,
                ..ScoreBudget::default()
            };
            (select_top_queries(scores, cfg.c), fill, budget)
        }
        AttentionKind::ProbSparse | AttentionKind::MaskedProbSparse => {
            let sample = sample_keys(lk, cfg.c, rng);
            let (m, budget) = sparsity_measure(g.value(q), g.value(k), &sample)?;
            let fill = if cfg.kind.is_masked() { LazyFill::Cumsum } else { LazyFill::Mean };
            (select_top_queries(&m, cfg.c), fill, budget)
        }
    };
    if lq != lk {
        return Err(Error::shape("sparse self-attention", g.shape(q), g.shape(k)));
    }
    let causal = cfg.kind.is_masked();
    let qs = g.gather_rows(q, &selected)?;
    let s = g.matmul_nt(qs, k)?;
    let s = g.scale(s, scale)?;
    let mask = causal.then(|| causal_mask(&selected, lk));
    let a = g.softmax(s, mask.as_deref())?;
    let o = g.matmul(a, v)?;
    let base = match fill {
        LazyFill::Mean => {
            let m = g.mean_rows(v)?;
            g.broadcast_rows(m, lq)?
        }
        LazyFill::Cumsum => g.cumsum_rows(v)?,
        LazyFill::RunningMean => {
            let cs = g.cumsum_rows(v)?;
            let dv = g.value(v).cols();
            let factors = (0..lq * dv).map(|i| 1.0 / (i / dv + 1) as f64).collect();
            g.mul_const(cs, factors)?
        }
    };
    budget.merge(&ScoreBudget {
        dot_products: (selected.len() * lk) as u64,
        rows_selected: selected.len() as u64,
        peak_score_bytes: (selected.len() * lk) as u64 * F64_BYTES,
        ..ScoreBudget::default()
    });
    g.stats.budget.merge(&budget);
    g.scatter_rows(base, o, &selected)
}

/// Parameter names of a multi-head block under `prefix`.
pub struct MultiHeadNames {
    pub wq: alloc::string::String,
    pub wk: alloc::string::String,
    pub wv: alloc::string::String,
    pub wo: alloc::string::String,
    pub imp_weight: alloc::string::String,
    pub imp_bias: alloc::string::String,
}

impl MultiHeadNames {
    pub fn new(prefix: &str) -> Self {
        MultiHeadNames {
            wq: format!("{prefix}.wq"),
            wk: format!("{prefix}.wk"),
            wv: format!("{prefix}.wv"),
            wo: format!("{prefix}.wo"),
            imp_weight: format!("{prefix}.importance.weight"),
            imp_bias: format!("{prefix}.importance.bias"),
        }
    }
}

/// Registers freshly initialized multi-head parameters.
pub fn init_multi_head<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let n = MultiHeadNames::new(prefix);
    let d = cfg.d_model;
    let bound = libm::sqrt(1.0 / d as f64);
    for name in [&n.wq, &n.wk, &n.wv, &n.wo] {
        store.insert(name.clone(), Tensor::uniform(&[d, d], bound, rng))?;
    }
    if cfg.kind.uses_importance_conv() {
        let b = libm::sqrt(1.0 / (3 * d) as f64);
        store.insert(n.imp_weight, Tensor::uniform(&[cfg.n_heads, d, 3], b, rng))?;
        store.insert(n.imp_bias, Tensor::zeros(&[cfg.n_heads]))?;
    }
    Ok(())
}

/// Multi-head attention on the tape: project, split heads, run the
/// configured kernel per head, concatenate and project out. For
/// NeuralSparse kinds the importance convolution runs once on the full-width
/// projected `Q + K`; column `h` selects head `h`'s queries.
pub fn multi_head_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    cfg: &AttentionConfig,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    cfg.validate()?;
    let n = MultiHeadNames::new(prefix);
    let wq = g.param(store, &n.wq)?;
    let wk = g.param(store, &n.wk)?;
    let wv = g.param(store, &n.wv)?;
    let wo = g.param(store, &n.wo)?;
    let q = g.matmul(x_q, wq)?;
    let k = g.matmul(x_kv, wk)?;
    let v = g.matmul(x_kv, wv)?;
    let importance = if cfg.kind.uses_importance_conv() {
        if g.shape(q) != g.shape(k) {
            return Err(Error::shape("NeuralSparse (self-attention only)", g.shape(q), g.shape(k)));
        }
        let w = g.param(store, &n.imp_weight)?;
        let b = g.param(store, &n.imp_bias)?;
        let qk = g.add(q, k)?;
        Some(g.conv1d(qk, w, Some(b), 1)?)
    } else {
        None
    };
    let dh = cfg.d_head();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = importance.map(|i| column(g.value(i), h));
        heads.push(head_graph(g, qh, kh, vh, cfg, scores.as_deref(), rng)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(merged, wo)
}

/// Plain-tensor multi-head attention with the parameters in `store`.
pub fn multi_head(
    x_q: &Tensor,
    x_kv: &Tensor,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut dyn RngCore,
) -> Result<(Tensor, ScoreBudget)> {
    let mut g = Graph::new();
    let xq = g.constant(x_q.clone());
    let xkv = if core::ptr::eq(x_q, x_kv) { xq } else { g.constant(x_kv.clone()) };
    let out = multi_head_graph(&mut g, store, prefix, xq, xkv, cfg, rng)?;
    Ok((g.value(out).clone(), g.stats.budget))
}
