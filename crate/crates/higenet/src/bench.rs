//! Attention microbenchmark over `(batch, seq_len, heads, dims)` inputs.
//!
//! Each record times one kernel on one `(batch, seq_len)` cell: warm-up
//! runs are discarded, then the median of the timed repeats is reported
//! together with the exact number of query–key dot products and the largest
//! per-head score buffer. Sparse kernels also report their three phases:
//! query scoring (`t1`), top-n selection (`t2`) and aggregation (`t3`).

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use higenet_core::attention::{
    canonical_attention_budgeted, column, importance_scores, sample_keys, select_top_queries, sparse_aggregate,
    sparsity_measure, LazyFill, ScoreBudget, DEFAULT_SPARSITY,
};
use higenet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKernel {
    Canonical,
    ProbSparse,
    NeuralSparse,
}

impl BenchKernel {
    pub const ALL: [BenchKernel; 3] = [BenchKernel::Canonical, BenchKernel::ProbSparse, BenchKernel::NeuralSparse];

    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::Canonical => "canonical",
            BenchKernel::ProbSparse => "prob_sparse",
            BenchKernel::NeuralSparse => "neural_sparse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub kernels: Vec<BenchKernel>,
    pub batches: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub heads: usize,
    pub dims: usize,
    pub c: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Cells whose inputs and score buffers would exceed this are recorded
    /// as failed instead of run.
    pub max_bytes: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            kernels: BenchKernel::ALL.to_vec(),
            batches: vec![1, 4, 16, 32, 64],
            seq_lens: vec![64, 128, 256, 512, 768, 1024],
            heads: 8,
            dims: 64,
            c: DEFAULT_SPARSITY,
            repeats: 5,
            warmup: 1,
            seed: 0,
            max_bytes: 2 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub kernel: BenchKernel,
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub dims: usize,
    pub median_ns: u64,
    pub dot_products: u64,
    pub peak_bytes: u64,
    pub t1_ns: u64,
    pub t2_ns: u64,
    pub t3_ns: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

pub const CSV_HEADER: &str = "kernel,batch,seq_len,heads,dims,median_ns,dot_products,peak_bytes,t1_ns,t2_ns,t3_ns";

/// Distinct random batch items kept in memory; item `b` reuses `b % POOL`.
const POOL: usize = 4;

/// One batch item: per-head `[L × dims]` slices plus the full-width `Q`
/// and `K` the importance convolution reads.
pub struct BenchItem {
    pub q: Vec<Tensor>,
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub q_full: Tensor,
    pub k_full: Tensor,
}

impl BenchItem {
    pub fn random(seq_len: usize, heads: usize, dims: usize, rng: &mut ChaCha8Rng) -> Self {
        let full = |rng: &mut ChaCha8Rng| Tensor::normal(&[seq_len, heads * dims], 1.0, rng);
        let (q_full, k_full, v_full) = (full(rng), full(rng), full(rng));
        let split = |t: &Tensor| -> Vec<Tensor> {
            (0..heads)
                .map(|h| {
                    let data = (0..seq_len)
                        .flat_map(|r| t.row(r)[h * dims..(h + 1) * dims].iter().copied())
                        .collect();
                    Tensor::new(&[seq_len, dims], data).expect("head slice")
                })
                .collect()
        };
        BenchItem {
            q: split(&q_full),
            k: split(&k_full),
            v: split(&v_full),
            q_full,
            k_full,
        }
    }
}

/// Shared importance-convolution weights (`heads × heads·dims × 3`).
pub fn importance_kernel(heads: usize, dims: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let bound = (1.0 / (3 * heads * dims) as f64).sqrt();
    (Tensor::uniform(&[heads, heads * dims, 3], bound, rng), Tensor::zeros(&[heads]))
}

/// Result of one kernel over one batch item.
pub struct KernelRun {
    pub outputs: Vec<Tensor>,
    pub budget: ScoreBudget,
    pub dot_products: u64,
    pub phase_ns: [u64; 3],
}

fn elapsed(t: Instant) -> u64 {
    t.elapsed().as_nanos() as u64
}

/// Runs `kernel` on every head of `item`.
pub fn run_kernel(
    kernel: BenchKernel,
    item: &BenchItem,
    conv: &(Tensor, Tensor),
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<KernelRun> {
    let heads = item.q.len();
    let mut outputs = Vec::with_capacity(heads);
    let mut budget = ScoreBudget::default();
    let mut dots = 0;
    let mut phase = [0u64; 3];
    let scores = match kernel {
        BenchKernel::NeuralSparse => {
            let t = Instant::now();
            let s = importance_scores(&item.q_full, &item.k_full, &conv.0, Some(&conv.1))?;
            phase[0] += elapsed(t);
            Some(s)
        }
        _ => None,
    };
    for h in 0..heads {
        let (q, k, v) = (&item.q[h], &item.k[h], &item.v[h]);
        let (out, b) = match kernel {
            BenchKernel::Canonical => {
                let t = Instant::now();
                let r = canonical_attention_budgeted(q, k, v, false)?;
                phase[2] += elapsed(t);
                r
            }
            BenchKernel::NeuralSparse => {
                let t = Instant::now();
                let col = column(scores.as_ref().expect("scores computed"), h);
                let sel = select_top_queries(&col, c);
                phase[1] += elapsed(t);
                let t = Instant::now();
                let (o, mut b) = sparse_aggregate(q, k, v, &sel, false, LazyFill::Mean)?;
                phase[2] += elapsed(t);
                b.conv_passes = 1;
                (o, b)
            }
            BenchKernel::ProbSparse => {
                let t = Instant::now();
                let sample = sample_keys(k.rows(), c, rng);
                let (m, mut b) = sparsity_measure(q, k, &sample)?;
                phase[0] += elapsed(t);
                let t = Instant::now();
                let sel = select_top_queries(&m, c);
                phase[1] += elapsed(t);
                let t = Instant::now();
                let (o, agg) = sparse_aggregate(q, k, v, &sel, false, LazyFill::Mean)?;
                phase[2] += elapsed(t);
                b.merge(&agg);
                (o, b)
            }
        };
        dots += b.dot_products;
        budget.merge(&b);
        outputs.push(out);
    }
    Ok(KernelRun {
        outputs,
        budget,
        dot_products: dots,
        phase_ns: phase,
    })
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    match xs.len() {
        0 => 0,
        n if n % 2 == 1 => xs[n / 2],
        n => (xs[n / 2 - 1] + xs[n / 2]) / 2,
    }
}

/// Bytes held by the inputs of one cell plus the largest score buffer.
fn estimated_bytes(cfg: &BenchConfig, batch: usize, l: usize) -> u64 {
    let items = batch.min(POOL) as u64;
    let inputs = items * 5 * (l * cfg.heads * cfg.dims) as u64 * 8;
    inputs + (l * l) as u64 * 8
}

fn bench_cell(
    cfg: &BenchConfig,
    kernel: BenchKernel,
    batch: usize,
    l: usize,
    items: &[BenchItem],
    conv: &(Tensor, Tensor),
) -> Result<BenchRecord> {
    // every repeat replays the same key samples so counters stay identical
    let run_once = || -> Result<(u64, u64, u64, [u64; 3])> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut dots = 0;
        let mut peak = 0;
        let mut phase = [0u64; 3];
        let t = Instant::now();
        for b in 0..batch {
            let r = run_kernel(kernel, &items[b % items.len()], conv, cfg.c, &mut rng)?;
            dots += r.dot_products;
            peak = peak.max(r.budget.peak_score_bytes);
            for (p, x) in phase.iter_mut().zip(r.phase_ns) {
                *p += x;
            }
        }
        Ok((elapsed(t), dots, peak, phase))
    };
    for _ in 0..cfg.warmup {
        run_once()?;
    }
    let mut totals = Vec::with_capacity(cfg.repeats);
    let mut phases: [Vec<u64>; 3] = Default::default();
    let mut counters = None;
    for _ in 0..cfg.repeats.max(1) {
        let (ns, dots, peak, ph) = run_once()?;
        totals.push(ns);
        for (v, x) in phases.iter_mut().zip(ph) {
            v.push(x);
        }
        match counters {
            None => counters = Some((dots, peak)),
            Some(c) if c != (dots, peak) => {
                return Err(Error::Config(format!("{} counters changed between repeats", kernel.name())))
            }
            _ => {}
        }
    }
    let (dot_products, peak_bytes) = counters.unwrap_or_default();
    let [p1, p2, p3] = phases;
    Ok(BenchRecord {
        kernel,
        batch,
        seq_len: l,
        heads: cfg.heads,
        dims: cfg.dims,
        median_ns: median(totals),
        dot_products,
        peak_bytes,
        t1_ns: median(p1),
        t2_ns: median(p2),
        t3_ns: median(p3),
        failed: None,
    })
}

fn failed(cfg: &BenchConfig, kernel: BenchKernel, batch: usize, l: usize, why: String) -> BenchRecord {
    BenchRecord {
        kernel,
        batch,
        seq_len: l,
        heads: cfg.heads,
        dims: cfg.dims,
        median_ns: 0,
        dot_products: 0,
        peak_bytes: 0,
        t1_ns: 0,
        t2_ns: 0,
        t3_ns: 0,
        failed: Some(why),
    }
}

/// One record per `(seq_len, batch, kernel)`, in that nesting order. A cell
/// that cannot run is recorded as failed and the sweep continues.
pub fn bench_attention(cfg: &BenchConfig, mut progress: impl FnMut(&BenchRecord)) -> Vec<BenchRecord> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let conv = importance_kernel(cfg.heads, cfg.dims, &mut rng);
    for &l in &cfg.seq_lens {
        let max_batch = cfg.batches.iter().copied().max().unwrap_or(1);
        let items: Vec<BenchItem> = if l == 0 || estimated_bytes(cfg, max_batch.min(POOL), l) > cfg.max_bytes {
            Vec::new()
        } else {
            (0..max_batch.min(POOL))
                .map(|_| BenchItem::random(l, cfg.heads, cfg.dims, &mut rng))
                .collect()
        };
        for &batch in &cfg.batches {
            for &kernel in &cfg.kernels {
                let rec = if items.is_empty() || batch == 0 {
                    failed(cfg, kernel, batch, l, format!("cell needs about {} bytes", estimated_bytes(cfg, batch, l)))
                } else {
                    match catch_unwind(AssertUnwindSafe(|| bench_cell(cfg, kernel, batch, l, &items, &conv))) {
                        Ok(Ok(r)) => r,
                        Ok(Err(e)) => failed(cfg, kernel, batch, l, e.to_string()),
                        Err(_) => failed(cfg, kernel, batch, l, "kernel panicked".into()),
                    }
                };
                progress(&rec);
                out.push(rec);
            }
        }
    }
    out
}

/// CSV with [`CSV_HEADER`]; failed cells keep zero timings and counters.
pub fn write_csv<W: Write>(w: W, records: &[BenchRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Config(format!("csv write: {e}"));
    wtr.write_record(CSV_HEADER.split(',')).map_err(err)?;
    for r in records {
        wtr.write_record([
            r.kernel.name().to_string(),
            r.batch.to_string(),
            r.seq_len.to_string(),
            r.heads.to_string(),
            r.dims.to_string(),
            r.median_ns.to_string(),
            r.dot_products.to_string(),
            r.peak_bytes.to_string(),
            r.t1_ns.to_string(),
            r.t2_ns.to_string(),
            r.t3_ns.to_string(),
        ])
        .map_err(err)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))
}
