//! Acceptance suite: one PASS/FAIL/SKIP line per criterion, nonzero exit on
//! any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use higenet::ablation::{run_ablation, AblationConfig, Provenance};
use higenet::bench::{bench_attention, BenchConfig, BenchKernel, BenchRecord};
use higenet::config::{DatasetConfig, EvalConfig, Preprocessing, RunConfig};
use higenet::csv_io::load_csv;
use higenet::pipeline::{prepare, run_train, CHECKPOINT_FILE};
use higenet::synth::{aiops_frame, seasonal_frame};
use higenet_core::attention::{
    init_multi_head, masked_neural_sparse_attention, multi_head_graph, neural_sparse_attention, prob_sparse_attention,
    select_top_queries, AttentionConfig, AttentionKind, ForwardCtx,
};
use higenet_core::data::{
    fit_apply_scaler, metrics, split_622, split_sizes, FitScope, ScaleMode, Scaler, SchemaKind, Task, TimeSeriesFrame,
};
use higenet_core::embedding::{embed_graph, positional_encoding, EmbeddingParams, TimeFeatures, STAMP_VOCAB};
use higenet_core::encoder::{
    attention_block_graph, encoder_forward, encoder_graph, feed_forward_graph, init_attention_block, init_encoder,
    init_feed_forward, init_layer_norm, layer_norm_graph, DistillKind, EncoderConfig,
};
use higenet_core::gradcheck::{check_graph, GradCheckReport, DEFAULT_STEP};
use higenet_core::model::{forward_graph, init_params, ModelConfig, Variant};
use higenet_core::train::{repeat_last_baseline, TrainConfig};
use higenet_core::data::WindowSample;
use higenet_core::{Graph, ParamStore, Result as CoreResult, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn mat(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Tensor {
    Tensor::uniform(&[l, d], 1.0, rng)
}

/// Dense softmax attention for one query row, keys `0..=i` when causal.
fn dense_row(q: &Tensor, k: &Tensor, v: &Tensor, i: usize, causal: bool) -> Vec<f64> {
    let d = q.cols() as f64;
    let keys: Vec<usize> = (0..k.rows()).filter(|&j| !causal || j <= i).collect();
    let logits: Vec<f64> = keys
        .iter()
        .map(|&j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; v.cols()];
    for (wj, &j) in w.iter().zip(&keys) {
        for (c, o) in out.iter_mut().enumerate() {
            *o += wj / z * v.at(j, c);
        }
    }
    out
}

fn column_means(v: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; v.cols()];
    for r in 0..v.rows() {
        for (c, x) in m.iter_mut().enumerate() {
            *x += v.at(r, c);
        }
    }
    m.iter().map(|x| x / v.rows() as f64).collect()
}

fn prefix_sum(v: &Tensor, i: usize) -> Vec<f64> {
    let mut s = vec![0.0; v.cols()];
    for r in 0..=i {
        for (c, x) in s.iter_mut().enumerate() {
            *x += v.at(r, c);
        }
    }
    s
}

fn ac1_sparse_dense_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut fill_mismatch, mut lazy_rows) = (0.0f64, 0usize, 0usize);
    for _ in 0..200 {
        let l = rng.random_range(4..=32);
        let d = if rng.random_bool(0.5) { 4 } else { 8 };
        let c = rng.random_range(1..=3);
        let (q, k, v) = (mat(&mut rng, l, d), mat(&mut rng, l, d), mat(&mut rng, l, d));
        let scores: Vec<f64> = (0..l).map(|_| rng.random()).collect();
        let selected = select_top_queries(&scores, c);
        let (out, _) = neural_sparse_attention(&q, &k, &v, &scores, c).unwrap();
        let (masked, _) = masked_neural_sparse_attention(&q, &k, &v, &scores, c, false).unwrap();
        let means = column_means(&v);
        for i in 0..l {
            if selected.contains(&i) {
                for (causal, o) in [(false, &out), (true, &masked)] {
                    let r = dense_row(&q, &k, &v, i, causal);
                    for (a, b) in o.row(i).iter().zip(&r) {
                        worst = worst.max((a - b).abs());
                    }
                }
            } else {
                lazy_rows += 1;
                fill_mismatch += usize::from(out.row(i) != means.as_slice());
                fill_mismatch += usize::from(masked.row(i) != prefix_sum(&v, i).as_slice());
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-10 && fill_mismatch == 0 && secs < 10.0,
        format!("max selected-row error {worst:.2e}, {lazy_rows} lazy rows, {fill_mismatch} fill mismatches, {secs:.2}s"),
    )
}

fn perturb_after(rng: &mut ChaCha8Rng, x: &Tensor, t: usize, scale: f64) -> Tensor {
    let mut y = x.clone();
    let cols = x.cols();
    let tp = rng.random_range(t + 1..x.rows());
    for c in 0..cols {
        y.data_mut()[tp * cols + c] += scale * rng.random_range(-1.0..1.0);
    }
    y
}

fn ac2_causality() -> Outcome {
    let l = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for _ in 0..20 {
        let t = rng.random_range(0..l - 1);
        let (q, k, v) = (mat(&mut rng, l, 4), mat(&mut rng, l, 4), mat(&mut rng, l, 4));
        // NeuralSparse: selection comes from the importance column, an input
        // of the kernel, so Q, K and V may move freely
        let scores: Vec<f64> = (0..l).map(|_| rng.random()).collect();
        let (base, _) = masked_neural_sparse_attention(&q, &k, &v, &scores, 1, false).unwrap();
        let (q2, k2, v2) = (
            perturb_after(&mut rng, &q, t, 3.0),
            perturb_after(&mut rng, &k, t, 3.0),
            perturb_after(&mut rng, &v, t, 3.0),
        );
        let (pert, _) = masked_neural_sparse_attention(&q2, &k2, &v2, &scores, 1, false).unwrap();
        for i in 0..=t {
            worst = worst.max(base.row(i).iter().zip(pert.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        // ProbSparse ranks every query by a measure over sampled keys; a
        // finite jump in future Q or K can reorder that ranking, so they get
        // a derivative-sized nudge while V moves freely
        let seed = rng.random();
        let (base, _) = prob_sparse_attention(&q, &k, &v, 1, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (q2, k2, v2) = (
            perturb_after(&mut rng, &q, t, 1e-6),
            perturb_after(&mut rng, &k, t, 1e-6),
            perturb_after(&mut rng, &v, t, 3.0),
        );
        let (pert, _) = prob_sparse_attention(&q2, &k2, &v2, 1, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for i in 0..=t {
            worst = worst.max(base.row(i).iter().zip(pert.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        trials += 2;
    }
    verdict(worst <= 1e-12, format!("{trials} perturbations, max change in rows <= t: {worst:.2e}"))
}

fn stamps(len: usize, rng: &mut ChaCha8Rng) -> TimeFeatures {
    TimeFeatures::new((0..len).map(|_| STAMP_VOCAB.map(|v| rng.random_range(0..v))).collect()).unwrap()
}

fn mse_to(g: &mut Graph, y: Var, target: &Tensor) -> CoreResult<Var> {
    let t = g.constant(target.clone());
    g.mse(y, t)
}

fn ac3_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    let d = 8;
    let x = Tensor::normal(&[12, d], 1.0, &mut rng);
    let x_kv = Tensor::normal(&[6, d], 1.0, &mut rng);

    // embedding with β gate and stamp tables
    {
        let f = stamps(12, &mut rng);
        let mut p = EmbeddingParams::init(2, d, &mut rng);
        p.tables = STAMP_VOCAB.map(|v| Tensor::normal(&[v, d], 0.5, &mut rng));
        p.gate_bias = Tensor::new(&[1], vec![0.3]).unwrap();
        let mut s = ParamStore::new();
        p.register(&mut s, "emb").unwrap();
        let values = Tensor::normal(&[12, 2], 1.0, &mut rng);
        let target = Tensor::normal(&[12, d], 1.0, &mut rng);
        let r = check_graph(
            |g, s| {
                let xv = g.constant(values.clone());
                let y = embed_graph(g, s, "emb", xv, &f, true)?;
                mse_to(g, y, &target)
            },
            &mut s,
            DEFAULT_STEP,
        );
        reports.push(("embedding".into(), r.unwrap()));
    }

    // every attention kind, plus cross-attention
    let kinds = [
        AttentionKind::Canonical,
        AttentionKind::NeuralSparse,
        AttentionKind::MaskedNeuralSparse,
        AttentionKind::ProbSparse,
        AttentionKind::MaskedProbSparse,
    ];
    for kind in kinds {
        let mut cfg = AttentionConfig::new(2, d, kind);
        cfg.c = 1;
        let mut s = ParamStore::new();
        init_multi_head(&mut s, "mh", &cfg, &mut rng).unwrap();
        let target = Tensor::normal(&[12, d], 1.0, &mut rng);
        let r = check_graph(
            |g, s| {
                let xv = g.constant(x.clone());
                let mut r = ChaCha8Rng::seed_from_u64(1);
                let y = multi_head_graph(g, s, "mh", xv, xv, &cfg, &mut r)?;
                mse_to(g, y, &target)
            },
            &mut s,
            DEFAULT_STEP,
        );
        reports.push((format!("attention/{}", kind.name()), r.unwrap()));
    }
    {
        let cfg = AttentionConfig::new(2, d, AttentionKind::Canonical);
        let mut s = ParamStore::new();
        init_multi_head(&mut s, "mh", &cfg, &mut rng).unwrap();
        let target = Tensor::normal(&[12, d], 1.0, &mut rng);
        let r = check_graph(
            |g, s| {
                let xq = g.constant(x.clone());
                let xk = g.constant(x_kv.clone());
                let mut r = ChaCha8Rng::seed_from_u64(1);
                let y = multi_head_graph(g, s, "mh", xq, xk, &cfg, &mut r)?;
                mse_to(g, y, &target)
            },
            &mut s,
            DEFAULT_STEP,
        );
        reports.push(("attention/cross".into(), r.unwrap()));
    }

    // layer norm and feed-forward
    {
        let mut s = ParamStore::new();
        init_layer_norm(&mut s, "ln", d).unwrap();
        init_feed_forward(&mut s, "ff", d, &mut rng).unwrap();
        *s.get_mut("ln.gain").unwrap() = Tensor::normal(&[d], 1.0, &mut rng);
        *s.get_mut("ln.bias").unwrap() = Tensor::normal(&[d], 0.3, &mut rng);
        *s.get_mut("ff.b1").unwrap() = Tensor::normal(&[4 * d], 0.3, &mut rng);
        let target = Tensor::normal(&[12, d], 1.0, &mut rng);
        let r = check_graph(
            |g, s| {
                let xv = g.constant(x.clone());
                let h = layer_norm_graph(g, s, "ln", xv)?;
                let y = feed_forward_graph(g, s, "ff", h)?;
                mse_to(g, y, &target)
            },
            &mut s,
            DEFAULT_STEP,
        );
        reports.push(("layer_norm+feed_forward".into(), r.unwrap()));
    }

    // attention blocks, both norm placements
    for post_norm in [true, false] {
        let cfg = AttentionConfig::new(2, d, AttentionKind::NeuralSparse);
        let mut s = ParamStore::new();
        init_attention_block(&mut s, "blk", &cfg, &mut rng).unwrap();
        let target = Tensor::normal(&[12, d], 1.0, &mut rng);
        let r = check_graph(
            |g, s| {
                let xv = g.constant(x.clone());
                let mut r = ChaCha8Rng::seed_from_u64(2);
                let mut ctx = ForwardCtx::eval(&mut r);
                let y = attention_block_graph(g, s, "blk", &cfg, post_norm, &mut ctx, xv)?;
                mse_to(g, y, &target)
            },
            &mut s,
            DEFAULT_STEP,
        );
        reports.push((format!("block/post_norm={post_norm}"), r.unwrap()));
    }

    // encoders; the HigeNet distill carries γ
    for distill in [DistillKind::Higenet, DistillKind::InformerMaxpool] {
        let cfg = EncoderConfig {
            n_blocks: 3,
            distill,
            attention: AttentionConfig::new(2, d, AttentionKind::NeuralSparse),
            post_norm: true,
        };
        let mut s = ParamStore::new();
        init_encoder(&mut s, "enc", &cfg, &mut rng).unwrap();
        if distill == DistillKind::Higenet {
            *s.get_mut("enc.distill0.gamma").unwrap() = Tensor::full(&[1], 0.7);
        }
        let target = Tensor::normal(&[3, d], 1.0, &mut rng);
        let r = check_graph(
            |g, s| {
                let xv = g.constant(x.clone());
                let mut r = ChaCha8Rng::seed_from_u64(3);
                let mut ctx = ForwardCtx::eval(&mut r);
                let y = encoder_graph(g, s, "enc", &cfg, &mut ctx, xv)?;
                mse_to(g, y, &target)
            },
            &mut s,
            DEFAULT_STEP,
        );
        let r = r.unwrap();
        if distill == DistillKind::Higenet {
            let gamma = s.get("enc.distill0.gamma").unwrap().grad().map_or(0.0, |g| g[0]);
            if gamma == 0.0 {
                return Outcome::Fail("γ received no gradient".into());
            }
        }
        reports.push((format!("encoder/{distill:?}"), r));
    }

    // full model, every variant
    for variant in Variant::ALL {
        let cfg = ModelConfig {
            d_x: 2,
            d_y: 2,
            d_model: 8,
            n_heads: 2,
            enc_blocks: 2,
            input_len: 12,
            label_len: 4,
            pred_len: 4,
            variant,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut s = init_params(&cfg, &mut rng).unwrap();
        let enc_values = Tensor::normal(&[12, 2], 1.0, &mut rng);
        let w = WindowSample {
            start: 0,
            enc_targets: enc_values.clone(),
            enc_values,
            enc_stamps: stamps(12, &mut rng),
            dec_stamps: stamps(cfg.decoder_len(), &mut rng),
            target: Tensor::normal(&[4, 2], 1.0, &mut rng),
        };
        let r = check_graph(
            |g, s| {
                let mut r = ChaCha8Rng::seed_from_u64(4);
                let mut ctx = ForwardCtx::eval(&mut r);
                let p = forward_graph(g, s, &cfg, &mut ctx, &w)?;
                mse_to(g, p, &w.target)
            },
            &mut s,
            DEFAULT_STEP,
        );
        reports.push((format!("model/{}", variant.name()), r.unwrap()));
    }

    let secs = t0.elapsed().as_secs_f64();
    let (name, worst) = reports
        .iter()
        .max_by(|a, b| a.1.max_relative_error.total_cmp(&b.1.max_relative_error))
        .map(|(n, r)| (n.clone(), r.max_relative_error))
        .unwrap();
    let coords: usize = reports.iter().map(|(_, r)| r.coordinates).sum();
    verdict(
        worst < 1e-4 && secs < 120.0,
        format!("{} suites, {coords} coordinates, worst rel. err {worst:.2e} ({name}), {secs:.1}s", reports.len()),
    )
}

fn ac4_shape_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let d = 8;
    let cfg = EncoderConfig {
        n_blocks: 3,
        distill: DistillKind::Higenet,
        attention: AttentionConfig::new(2, d, AttentionKind::NeuralSparse),
        post_norm: true,
    };
    let mut s = ParamStore::new();
    init_encoder(&mut s, "enc", &cfg, &mut rng).unwrap();
    let mut bad = Vec::new();
    let mut lens: Vec<usize> = vec![96, 48];
    lens.extend(4..=40);
    for l in lens {
        let x = Tensor::normal(&[l, d], 1.0, &mut rng);
        let y = encoder_forward(&x, &cfg, &s, "enc", &mut rng).unwrap();
        let expect = l.div_ceil(2).div_ceil(2);
        if y.shape() != [expect, d] {
            bad.push(format!("{l}->{:?}", y.shape()));
        }
    }
    verdict(bad.is_empty(), format!("96->24, 48->12 and L=4..40 checked; mismatches: {bad:?}"))
}

fn find(records: &[BenchRecord], kernel: BenchKernel, l: usize) -> &BenchRecord {
    records
        .iter()
        .find(|r| r.kernel == kernel && r.seq_len == l)
        .expect("record present")
}

fn bench_batch16() -> &'static [BenchRecord] {
    use std::sync::OnceLock;
    static RECORDS: OnceLock<Vec<BenchRecord>> = OnceLock::new();
    RECORDS.get_or_init(|| {
        let cfg = BenchConfig {
            kernels: vec![BenchKernel::Canonical, BenchKernel::NeuralSparse],
            batches: vec![16],
            seq_lens: vec![64, 256, 512, 1024],
            repeats: 5,
            warmup: 1,
            ..BenchConfig::default()
        };
        bench_attention(&cfg, |_| {})
    })
}

fn ac5_counters() -> Outcome {
    let recs = bench_batch16();
    let (canon, neural) = (find(recs, BenchKernel::Canonical, 1024), find(recs, BenchKernel::NeuralSparse, 1024));
    if canon.failed.is_some() || neural.failed.is_some() {
        return Outcome::Fail(format!("bench cell failed: {:?} {:?}", canon.failed, neural.failed));
    }
    let expect_canon = 8 * 16 * 1024u64 * 1024;
    let expect_neural = 8 * 16 * 35 * 1024u64;
    let exact = canon.dot_products == expect_canon
        && neural.dot_products == expect_neural
        && neural.dot_products * 1024 == canon.dot_products * 35;
    let ratio = neural.dot_products as f64 / canon.dot_products as f64;
    let mem = canon.peak_bytes as f64 / neural.peak_bytes as f64;
    verdict(
        exact && mem >= 20.0,
        format!(
            "dot products {} vs {} (ratio {ratio:.4}), peak score bytes {} vs {} ({mem:.1}x smaller)",
            neural.dot_products, canon.dot_products, neural.peak_bytes, canon.peak_bytes
        ),
    )
}

fn ac6_walltime() -> Outcome {
    let recs = bench_batch16();
    let lens = [64, 256, 512, 1024];
    let mut ratios = Vec::new();
    for l in lens {
        let (c, n) = (find(recs, BenchKernel::Canonical, l), find(recs, BenchKernel::NeuralSparse, l));
        if c.failed.is_some() || n.failed.is_some() {
            return Outcome::Fail(format!("bench cell at L={l} failed"));
        }
        ratios.push(n.median_ns as f64 / c.median_ns as f64);
    }
    // smallest grid length from which NeuralSparse stays faster
    let crossover = (0..lens.len()).find(|&i| ratios[i..].iter().all(|&r| r < 1.0)).map(|i| lens[i]);
    let trend = ratios.last().unwrap() < ratios.first().unwrap();
    let shown: Vec<String> = lens.iter().zip(&ratios).map(|(l, r)| format!("L={l}:{r:.3}")).collect();
    verdict(
        crossover.is_some_and(|l| l <= 1024) && trend,
        format!("neural/canonical median time {}; crossover L*={crossover:?}", shown.join(" ")),
    )
}

type MetricCase<'a> = (&'a [f64], &'a [f64], (f64, f64, f64));

fn ac7_metrics() -> Outcome {
    let cases: [MetricCase; 3] = [
        (&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], (1.0, 0.0, 0.0)),
        (&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], (-1.0, 8.0 / 3.0, 4.0 / 3.0)),
        (&[0.0, 2.0], &[1.0, 3.0], (1.0, 1.0, 1.0)),
    ];
    let mut worst = 0.0f64;
    for (y, p, (corr, mse, mae)) in cases {
        let m = metrics(y, p).unwrap();
        worst = worst.max((m.corr - corr).abs()).max((m.mse - mse).abs()).max((m.mae - mae).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut affine = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (a, b) = (rng.random_range(0.01..100.0), rng.random_range(-50.0..50.0));
        let base = metrics(&y, &p).unwrap().corr;
        let map = |v: &[f64]| v.iter().map(|x| a * x + b).collect::<Vec<_>>();
        let moved = metrics(&map(&y), &map(&p)).unwrap().corr;
        affine = affine.max((base - moved).abs());
    }
    verdict(
        worst <= 1e-12 && affine <= 1e-9,
        format!("example triples max error {worst:.1e}; affine CORR drift {affine:.1e} over 200 draws"),
    )
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    dot(a, b) / (dot(a, a) * dot(b, b)).sqrt()
}

fn ac8_positional() -> Outcome {
    let (l, d) = (96, 16);
    let pe = positional_encoding(l, d).unwrap();
    let row0 = pe.row(0).iter().enumerate().all(|(j, &x)| x == if j % 2 == 0 { 0.0 } else { 1.0 });
    let col0 = (0..l).all(|p| (pe.at(p, 0) - (p as f64).sin()).abs() <= 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut failures = 0;
    for _ in 0..100 {
        let raw: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = rng.random_range(0.1..10.0);
        let e: Vec<f64> = raw.iter().map(|x| x * target / norm).collect();
        let p1 = rng.random_range(0..l);
        let p2 = (p1 + rng.random_range(1..l)) % l;
        let a: Vec<f64> = e.iter().zip(pe.row(p1)).map(|(x, y)| x + y).collect();
        let b: Vec<f64> = e.iter().zip(pe.row(p2)).map(|(x, y)| x + y).collect();
        if cosine(&a, &b) >= 1.0 || cosine(&e, &e) != 1.0 {
            failures += 1;
        }
    }
    verdict(
        row0 && col0 && failures == 0,
        format!("row 0 alternates 0/1: {row0}; column 0 = sin(pos): {col0}; angle property failures: {failures}/100"),
    )
}

fn smoke_config(task: Task) -> RunConfig {
    RunConfig {
        dataset: DatasetConfig {
            path: PathBuf::from("synthetic"),
            schema: SchemaKind::Generic,
            target: None,
            task,
        },
        preprocessing: Preprocessing::default(),
        model: ModelConfig {
            d_model: 32,
            n_heads: 2,
            input_len: 48,
            label_len: 24,
            pred_len: 24,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            max_steps: Some(300),
            ..TrainConfig::default()
        },
        variant: None,
        eval: EvalConfig::default(),
    }
}

fn ac9_training_smoke() -> Outcome {
    let frame = seasonal_frame(4000, 3, 0.1, 9);
    let cfg = smoke_config(Task::Multivariate);
    let prepared = prepare(&cfg, &frame).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let t = Instant::now();
        let outcome = run_train(&cfg, &prepared, &out).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let bytes = std::fs::read(out.join(CHECKPOINT_FILE)).unwrap();
        runs.push((outcome, secs, bytes));
    }
    let baseline = repeat_last_baseline(&prepared.test, None).unwrap();
    let (first, secs, bytes) = &runs[0];
    let ratio = first.test.mse / baseline.mse;
    let identical = *bytes == runs[1].2;
    verdict(
        ratio < 0.8 && identical && *secs < 600.0 && first.history.steps() == 300,
        format!(
            "test MSE {:.4} vs repeat-last {:.4} (ratio {ratio:.3}); {} steps in {secs:.1}s; identical checkpoints: {identical}",
            first.test.mse,
            baseline.mse,
            first.history.steps()
        ),
    )
}

fn ac10_ablation() -> Outcome {
    let frame = aiops_frame(6000, 10);
    if let Err(e) = SchemaKind::Aiops.validate(&frame) {
        return Outcome::Fail(format!("sample is not AIOps-shaped: {e}"));
    }
    let model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        enc_blocks: 2,
        input_len: 96,
        label_len: 48,
        pred_len: 96,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 8,
        max_steps: Some(50),
        val_windows: Some(16),
        ..TrainConfig::default()
    };
    let cfg = AblationConfig {
        horizons: vec![96, 288, 576],
        eval_windows: Some(16),
        ..AblationConfig::new(model, train)
    };
    let t = Instant::now();
    let rows = match run_ablation(&cfg, &frame, |_| {}) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let mut problems = Vec::new();
    if rows.len() != 8 * 3 {
        problems.push(format!("{} rows", rows.len()));
    }
    for r in &rows {
        let finite = r.test.as_ref().is_some_and(|m| m.corr.is_finite() && m.mse.is_finite() && m.mae.is_finite());
        if r.status != "ok" || r.steps != 50 || !finite {
            problems.push(format!("{}@{}: {} {:?}", r.variant, r.horizon, r.status, r.error));
        }
        let v = Variant::from_name(&r.variant).unwrap();
        let kernel = if v.neural { "neural_sparse" } else { "prob_sparse" };
        let signature = if v.neural {
            r.conv_passes > 0 && r.sampled_dot_products == 0
        } else {
            r.conv_passes == 0 && r.sampled_dot_products > 0
        };
        if r.provenance.encoder_attention != kernel || !signature {
            problems.push(format!("{}@{} kernel mismatch", r.variant, r.horizon));
        }
    }
    // toggling N alone changes only the attention fields
    for v in Variant::ALL.into_iter().filter(|v| !v.neural) {
        let with_n = Variant { neural: true, ..v };
        let (a, b) = (
            Provenance::of(&ModelConfig { variant: v, ..model }),
            Provenance::of(&ModelConfig { variant: with_n, ..model }),
        );
        let same_rest = a.embedding == b.embedding && a.distill == b.distill;
        if !same_rest || a.encoder_attention == b.encoder_attention || a.decoder_self_attention == b.decoder_self_attention {
            problems.push(format!("toggle N on {} not isolated", v.name()));
        }
    }
    verdict(
        problems.is_empty(),
        format!("{} rows (8 variants x 3 horizons) in {:.1}s; problems: {problems:?}", rows.len(), t.elapsed().as_secs_f64()),
    )
}

fn ac11_preprocessing() -> Outcome {
    let frame = seasonal_frame(500, 3, 0.3, 11);
    let (tr, va, te) = split_622(&frame, 10).unwrap();
    let mut notes = Vec::new();
    for mode in ScaleMode::ALL {
        if let Err(e) = fit_apply_scaler(&tr, &va, &te, mode, FitScope::TrainOnly) {
            notes.push(format!("{mode:?}: {e}"));
        }
    }
    let s = Scaler::fit(ScaleMode::StandardizePerDim, FitScope::TrainOnly, &[&tr]).unwrap();
    let back = s.inverse(&s.apply(&frame).unwrap()).unwrap();
    let round = frame.values().iter().zip(back.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mutated: Vec<f64> = te.values().iter().map(|x| x * 7.0 + 100.0).collect();
    let te2 = TimeSeriesFrame::new(te.timestamps().to_vec(), te.columns().to_vec(), mutated, te.target()).unwrap();
    let mut independent = true;
    let mut leaks = true;
    for mode in ScaleMode::ALL {
        let a = fit_apply_scaler(&tr, &va, &te, mode, FitScope::TrainOnly).unwrap();
        let b = fit_apply_scaler(&tr, &va, &te2, mode, FitScope::TrainOnly).unwrap();
        independent &= a.scaler == b.scaler && a.train == b.train && a.val == b.val;
        if mode != ScaleMode::None {
            let c = fit_apply_scaler(&tr, &va, &te, mode, FitScope::TrainPlusTest).unwrap();
            let d = fit_apply_scaler(&tr, &va, &te2, mode, FitScope::TrainPlusTest).unwrap();
            leaks &= c.scaler != d.scaler;
        }
    }
    verdict(
        notes.is_empty() && round <= 1e-9 && independent && leaks,
        format!(
            "5 modes fitted {notes:?}; round trip {round:.1e}; train_only unchanged by test mutation: {independent}; train_plus_test reacts: {leaks}"
        ),
    )
}

fn ac12_dataset() -> Outcome {
    let path = std::env::var_os("HIGENET_AIOPS_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/aiops.csv"));
    if !path.exists() {
        let arithmetic = split_sizes(101_583) == (60_949, 20_317, 20_317);
        return Outcome::Skip(format!(
            "external-data: {} not found (set HIGENET_AIOPS_CSV); split arithmetic for L=101583 holds: {arithmetic}",
            path.display()
        ));
    }
    let frame = match load_csv(&path, SchemaKind::Aiops, None) {
        Ok(f) => f,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let interval = frame.interval().map(|d| d.num_minutes());
    let (tr, va, te) = split_622(&frame, 1).unwrap();
    let counts = (tr.len(), va.len(), te.len());
    verdict(
        frame.len() == 101_583 && frame.n_cols() == 20 && interval == Some(5) && counts == (60_949, 20_317, 20_317),
        format!("L={} D={} interval={interval:?}min split={counts:?}", frame.len(), frame.n_cols()),
    )
}

fn main() {
    let checks: [(&str, Check); 12] = [
        ("sparse/dense oracle", ac1_sparse_dense_oracle),
        ("causality", ac2_causality),
        ("gradient suite", ac3_gradients),
        ("shape law", ac4_shape_law),
        ("complexity counters", ac5_counters),
        ("wall-time trend", ac6_walltime),
        ("metric oracles", ac7_metrics),
        ("positional encoding", ac8_positional),
        ("training smoke", ac9_training_smoke),
        ("ablation harness", ac10_ablation),
        ("preprocessing modes", ac11_preprocessing),
        ("dataset plumbing", ac12_dataset),
    ];
    let filter = std::env::args().skip(1).find(|a| a.starts_with("AC"));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let id = format!("AC{}", i + 1);
        if filter.as_deref().is_some_and(|f| f != id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {id} {name} [{secs:.1}s]: {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
