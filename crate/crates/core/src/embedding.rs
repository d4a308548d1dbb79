//! Model input embedding: token projection, fixed positional encoding and
//! learnable calendar-stamp tables mixed through a non-negative per-position
//! gate.
//!
//! `X = conv(values) + PE + β ⊙ Σ_p SE_p` with `β = ReLU(FC(PE + Σ_p SE_p))`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{ParamStore, Tensor};

/// Stamp categories, in table order.
pub const STAMP_CATEGORIES: [&str; 5] = ["month", "day", "weekday", "hour", "minute"];
/// Vocabulary size per category: month 0..=12, day 0..=31, weekday 0..=6,
/// hour 0..=23, 15-minute bucket 0..=3.
pub const STAMP_VOCAB: [usize; 5] = [13, 32, 7, 24, 4];

/// Integer calendar indices for each position of a window.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TimeFeatures {
    rows: Vec<[usize; 5]>,
}

impl TimeFeatures {
    pub fn new(rows: Vec<[usize; 5]>) -> Result<Self> {
        for row in &rows {
            for (c, (&v, &vocab)) in row.iter().zip(&STAMP_VOCAB).enumerate() {
                if v >= vocab {
                    return Err(Error::StampOutOfRange {
                        category: STAMP_CATEGORIES[c],
                        value: v,
                        vocab,
                    });
                }
            }
        }
        Ok(TimeFeatures { rows })
    }

    pub fn stamp(t: &NaiveDateTime) -> [usize; 5] {
        [
            t.month() as usize,
            t.day() as usize,
            t.weekday().num_days_from_monday() as usize,
            t.hour() as usize,
            (t.minute() / 15) as usize,
        ]
    }

    pub fn from_datetimes(ts: &[NaiveDateTime]) -> Self {
        TimeFeatures {
            rows: ts.iter().map(Self::stamp).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[[usize; 5]] {
        &self.rows
    }

    pub fn category(&self, c: usize) -> Vec<usize> {
        self.rows.iter().map(|r| r[c]).collect()
    }

    /// Concatenates two feature blocks (e.g. label tail + horizon).
    pub fn concat(&self, other: &TimeFeatures) -> TimeFeatures {
        let mut rows = self.rows.clone();
        rows.extend_from_slice(&other.rows);
        TimeFeatures { rows }
    }
}

/// Fixed sinusoidal table `PE[pos, 2j] = sin(pos / (2L)^(2j/d))`,
/// `PE[pos, 2j+1] = cos(·)`, for `pos < len`.
pub fn positional_encoding(len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::invalid(format!("positional encoding needs even d_model, got {d_model}")));
    }
    if len == 0 {
        return Err(Error::invalid("positional encoding needs len >= 1"));
    }
    let base = 2.0 * len as f64;
    let mut data = alloc::vec![0.0; len * d_model];
    for pos in 0..len {
        for j in 0..d_model / 2 {
            let angle = pos as f64 / libm::pow(base, (2 * j) as f64 / d_model as f64);
            data[pos * d_model + 2 * j] = libm::sin(angle);
            data[pos * d_model + 2 * j + 1] = libm::cos(angle);
        }
    }
    Tensor::new(&[len, d_model], data)
}

/// Parameters of one embedding (encoder and decoder each own one).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    /// `[d_model × d_in × 3]`
    pub token_kernel: Tensor,
    /// One `[vocab × d_model]` table per stamp category.
    pub tables: [Tensor; 5],
    /// `[d_model × 1]`
    pub gate_weight: Tensor,
    /// `[1]`
    pub gate_bias: Tensor,
}

struct Names {
    token: String,
    tables: [String; 5],
    gate_w: String,
    gate_b: String,
}

impl Names {
    fn new(prefix: &str) -> Self {
        Names {
            token: format!("{prefix}.token.weight"),
            tables: STAMP_CATEGORIES.map(|c| format!("{prefix}.stamp.{c}")),
            gate_w: format!("{prefix}.gate.weight"),
            gate_b: format!("{prefix}.gate.bias"),
        }
    }
}

impl EmbeddingParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_model: usize, rng: &mut R) -> Self {
        let conv_bound = libm::sqrt(1.0 / (3 * d_in) as f64);
        let fc_bound = libm::sqrt(1.0 / d_model as f64);
        EmbeddingParams {
            token_kernel: Tensor::uniform(&[d_model, d_in, 3], conv_bound, rng),
            tables: STAMP_VOCAB.map(|v| Tensor::normal(&[v, d_model], 0.02, rng)),
            gate_weight: Tensor::uniform(&[d_model, 1], fc_bound, rng),
            gate_bias: Tensor::zeros(&[1]),
        }
    }

    /// All-zero parameters of the given widths.
    pub fn zeros(d_in: usize, d_model: usize) -> Self {
        EmbeddingParams {
            token_kernel: Tensor::zeros(&[d_model, d_in, 3]),
            tables: STAMP_VOCAB.map(|v| Tensor::zeros(&[v, d_model])),
            gate_weight: Tensor::zeros(&[d_model, 1]),
            gate_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.token_kernel.shape()[0]
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let n = Names::new(prefix);
        store.insert(n.token, self.token_kernel.clone())?;
        for (name, t) in n.tables.into_iter().zip(&self.tables) {
            store.insert(name, t.clone())?;
        }
        store.insert(n.gate_w, self.gate_weight.clone())?;
        store.insert(n.gate_b, self.gate_bias.clone())
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let n = Names::new(prefix);
        let tables = [
            store.get(&n.tables[0])?.clone(),
            store.get(&n.tables[1])?.clone(),
            store.get(&n.tables[2])?.clone(),
            store.get(&n.tables[3])?.clone(),
            store.get(&n.tables[4])?.clone(),
        ];
        Ok(EmbeddingParams {
            token_kernel: store.get(&n.token)?.clone(),
            tables,
            gate_weight: store.get(&n.gate_w)?.clone(),
            gate_bias: store.get(&n.gate_b)?.clone(),
        })
    }
}

struct EmbedVars {
    token: Var,
    tables: [Var; 5],
    gate_w: Var,
    gate_b: Var,
}

impl EmbedVars {
    fn constants(g: &mut Graph, p: &EmbeddingParams) -> Self {
        EmbedVars {
            token: g.constant(p.token_kernel.clone()),
            tables: [
                g.constant(p.tables[0].clone()),
                g.constant(p.tables[1].clone()),
                g.constant(p.tables[2].clone()),
                g.constant(p.tables[3].clone()),
                g.constant(p.tables[4].clone()),
            ],
            gate_w: g.constant(p.gate_weight.clone()),
            gate_b: g.constant(p.gate_bias.clone()),
        }
    }

    fn params(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let n = Names::new(prefix);
        Ok(EmbedVars {
            token: g.param(store, &n.token)?,
            tables: [
                g.param(store, &n.tables[0])?,
                g.param(store, &n.tables[1])?,
                g.param(store, &n.tables[2])?,
                g.param(store, &n.tables[3])?,
                g.param(store, &n.tables[4])?,
            ],
            gate_w: g.param(store, &n.gate_w)?,
            gate_b: g.param(store, &n.gate_b)?,
        })
    }
}

fn stamp_sum(g: &mut Graph, v: &EmbedVars, features: &TimeFeatures) -> Result<Var> {
    // re-validate: features may have been built without `new`
    TimeFeatures::new(features.rows.clone())?;
    let mut acc: Option<Var> = None;
    for (c, &table) in v.tables.iter().enumerate() {
        let looked = g.embedding(table, &features.category(c))?;
        acc = Some(match acc {
            None => looked,
            Some(a) => g.add(a, looked)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("no stamp categories"))
}

fn gate(g: &mut Graph, v: &EmbedVars, pe_plus_se: Var) -> Result<Var> {
    let z = g.matmul(pe_plus_se, v.gate_w)?;
    let z = g.add_row(z, v.gate_b)?;
    g.relu(z)
}

fn embed(g: &mut Graph, v: &EmbedVars, values: Var, features: &TimeFeatures, gated: bool) -> Result<Var> {
    let (len, _) = g.value(values).dims2()?;
    if features.len() != len {
        return Err(Error::shape("embed_window stamps", g.shape(values), &[features.len()]));
    }
    let d_model = g.shape(v.token)[0];
    let u = g.conv1d(values, v.token, None, 1)?;
    let pe = g.constant(positional_encoding(len, d_model)?);
    let se = stamp_sum(g, v, features)?;
    let x = g.add(u, pe)?;
    let stamps = if gated {
        let mix = g.add(pe, se)?;
        let beta = gate(g, v, mix)?;
        g.mul_col(se, beta)?
    } else {
        se
    };
    g.add(x, stamps)
}

/// Per-position sum of the category tables' looked-up rows.
pub fn stamp_embedding_sum(features: &TimeFeatures, params: &EmbeddingParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = EmbedVars::constants(&mut g, params);
    let out = stamp_sum(&mut g, &v, features)?;
    Ok(g.value(out).clone())
}

/// `β = ReLU(FC(PE + ΣSE))`, one non-negative scalar per position (`[L × 1]`).
pub fn beta_gate(pe_plus_se: &Tensor, params: &EmbeddingParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = EmbedVars::constants(&mut g, params);
    let x = g.constant(pe_plus_se.clone());
    let out = gate(&mut g, &v, x)?;
    Ok(g.value(out).clone())
}

/// Full embedding of a window. With `gated = false` the stamp sum enters
/// with unit weight.
pub fn embed_window(values: &Tensor, features: &TimeFeatures, params: &EmbeddingParams, gated: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = EmbedVars::constants(&mut g, params);
    let x = g.constant(values.clone());
    let out = embed(&mut g, &v, x, features, gated)?;
    Ok(g.value(out).clone())
}

/// Registers a freshly initialized embedding under `prefix`.
pub fn init_embedding<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, d_model: usize, rng: &mut R) -> Result<()> {
    EmbeddingParams::init(d_in, d_model, rng).register(store, prefix)
}

/// Embedding on the tape with parameters bound from `store`.
pub fn embed_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    values: Var,
    features: &TimeFeatures,
    gated: bool,
) -> Result<Var> {
    let v = EmbedVars::params(g, store, prefix)?;
    embed(g, &v, values, features, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_graph, DEFAULT_STEP};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features(len: usize, rng: &mut ChaCha8Rng) -> TimeFeatures {
        TimeFeatures::new(
            (0..len)
                .map(|_| STAMP_VOCAB.map(|v| rng.random_range(0..v)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pe_identities() {
        let pe = positional_encoding(96, 8).unwrap();
        for j in 0..8 {
            assert_eq!(pe.at(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        for pos in 0..96 {
            assert_eq!(pe.at(pos, 0), libm::sin(pos as f64));
        }
        assert!((pe.at(1, 2) - 0.2654).abs() < 5e-5);
        assert!((pe.at(1, 2) - (1.0 / 192f64.powf(0.25)).sin()).abs() < 1e-15);
        assert!(positional_encoding(4, 7).is_err());
    }

    #[test]
    fn pe_rows_distinct() {
        for (len, d) in [(96, 8), (48, 32), (12, 8), (49, 512)] {
            let pe = positional_encoding(len, d).unwrap();
            for a in 0..len {
                for b in a + 1..len {
                    let diff: f64 = pe.row(a).iter().zip(pe.row(b)).map(|(x, y)| (x - y).abs()).sum();
                    assert!(diff > 1e-6, "rows {a},{b} alias at L={len}, d={d}");
                }
            }
        }
    }

    #[test]
    fn stamp_sum_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = features(5, &mut rng);
        let zero = EmbeddingParams::zeros(2, 4);
        assert!(stamp_embedding_sum(&f, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let mut p = EmbeddingParams::zeros(2, 4);
        p.tables[3] = Tensor::normal(&[24, 4], 1.0, &mut rng);
        let s = stamp_embedding_sum(&f, &p).unwrap();
        for (i, row) in f.rows().iter().enumerate() {
            assert_eq!(s.row(i), p.tables[3].row(row[3]));
        }

        p.tables[0] = Tensor::normal(&[13, 4], 1.0, &mut rng);
        let s = stamp_embedding_sum(&f, &p).unwrap();
        for (i, row) in f.rows().iter().enumerate() {
            for c in 0..4 {
                assert_eq!(s.at(i, c), p.tables[0].at(row[0], c) + p.tables[3].at(row[3], c));
            }
        }
    }

    #[test]
    fn out_of_range_stamp_is_named() {
        let err = TimeFeatures::new(alloc::vec![[1, 1, 9, 0, 0]]).unwrap_err();
        assert_eq!(
            err,
            Error::StampOutOfRange {
                category: "weekday",
                value: 9,
                vocab: 7
            }
        );
    }

    #[test]
    fn gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::normal(&[6, 4], 1.0, &mut rng);
        let mut p = EmbeddingParams::zeros(1, 4);
        p.gate_bias = Tensor::new(&[1], alloc::vec![-1.0]).unwrap();
        assert!(beta_gate(&x, &p).unwrap().data().iter().all(|&b| b == 0.0));
        p.gate_bias = Tensor::new(&[1], alloc::vec![0.5]).unwrap();
        assert!(beta_gate(&x, &p).unwrap().data().iter().all(|&b| b == 0.5));

        p.gate_weight = Tensor::normal(&[4, 1], 1.0, &mut rng);
        p.gate_bias = Tensor::new(&[1], alloc::vec![0.1]).unwrap();
        let beta = beta_gate(&x, &p).unwrap();
        assert_eq!(beta.shape(), &[6, 1]);
        for i in 0..6 {
            let hand: f64 = (0..4).map(|c| x.at(i, c) * p.gate_weight.data()[c]).sum::<f64>() + 0.1;
            assert!((beta.data()[i] - hand.max(0.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn embed_window_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = features(7, &mut rng);
        let values = Tensor::normal(&[7, 2], 1.0, &mut rng);
        let pe = positional_encoding(7, 8).unwrap();

        let mut p = EmbeddingParams::init(2, 8, &mut rng);
        let u = crate::ops::conv1d_time(&values, &p.token_kernel, None, 1).unwrap();
        let u_plus_pe: alloc::vec::Vec<f64> = u.data().iter().zip(pe.data()).map(|(a, b)| a + b).collect();

        let saved_tables = p.tables.clone();
        p.tables = STAMP_VOCAB.map(|v| Tensor::zeros(&[v, 8]));
        let x = embed_window(&values, &f, &p, true).unwrap();
        assert_eq!(x.data(), &u_plus_pe[..]);

        p.tables = saved_tables;
        p.gate_bias = Tensor::new(&[1], alloc::vec![-1e6]).unwrap();
        let x = embed_window(&values, &f, &p, true).unwrap();
        assert_eq!(x.data(), &u_plus_pe[..]);

        let zero_in = Tensor::zeros(&[7, 2]);
        p.tables = STAMP_VOCAB.map(|v| Tensor::zeros(&[v, 8]));
        let x = embed_window(&zero_in, &f, &p, true).unwrap();
        assert_eq!(x, pe);
    }

    #[test]
    fn ungated_equals_unit_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = features(9, &mut rng);
        let values = Tensor::normal(&[9, 3], 1.0, &mut rng);
        let mut p = EmbeddingParams::init(3, 8, &mut rng);
        let ungated = embed_window(&values, &f, &p, false).unwrap();
        p.gate_weight = Tensor::zeros(&[8, 1]);
        p.gate_bias = Tensor::new(&[1], alloc::vec![1.0]).unwrap();
        let unit = embed_window(&values, &f, &p, true).unwrap();
        assert_eq!(ungated, unit);
        assert_eq!(embed_window(&values, &f, &p, true).unwrap(), unit);
    }

    #[test]
    fn embedding_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = features(6, &mut rng);
        let mut store = ParamStore::new();
        let mut p = EmbeddingParams::init(2, 8, &mut rng);
        // widen the tables so gradients through the gate are not tiny
        p.tables = STAMP_VOCAB.map(|v| Tensor::normal(&[v, 8], 0.5, &mut rng));
        p.gate_bias = Tensor::new(&[1], alloc::vec![0.3]).unwrap();
        p.register(&mut store, "emb").unwrap();
        let values = Tensor::normal(&[6, 2], 1.0, &mut rng);
        let target = Tensor::normal(&[6, 8], 1.0, &mut rng);
        let r = check_graph(
            |g, s| {
                let x = g.constant(values.clone());
                let y = embed_graph(g, s, "emb", x, &f, true)?;
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &mut store,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    proptest! {
        #[test]
        fn positional_angle_property(
            e in proptest::collection::vec(-1.0f64..1.0, 8),
            norm in 0.1f64..10.0,
            p1 in 0usize..48,
            p2 in 0usize..48,
        ) {
            prop_assume!(p1 != p2);
            let len: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(len > 1e-6);
            let e: alloc::vec::Vec<f64> = e.iter().map(|v| v / len * norm).collect();
            let pe = positional_encoding(48, 8).unwrap();
            let cos = |a: &[f64], b: &[f64]| {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                d / (na * nb)
            };
            prop_assert!((cos(&e, &e) - 1.0).abs() < 1e-12);
            let a: alloc::vec::Vec<f64> = e.iter().zip(pe.row(p1)).map(|(x, p)| x + p).collect();
            let b: alloc::vec::Vec<f64> = e.iter().zip(pe.row(p2)).map(|(x, p)| x + p).collect();
            prop_assert!(cos(&a, &b) < 1.0);
        }
    }
}
