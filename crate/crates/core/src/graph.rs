//! Recording tape for reverse-mode gradients.
//!
//! Every operation evaluates eagerly, stores its value, and appends a node
//! describing how to push an upstream gradient back to its inputs. A
//! [`Graph`] lives for one forward/backward pass; parameters are copied in
//! from a [`ParamStore`] by name and their gradients are written back by
//! [`Graph::accumulate_param_grads`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::ScoreBudget;
use crate::error::{Error, Result};
use crate::ops::{self, PoolKind};
use crate::tensor::{ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        kernel: usize,
        stride: usize,
        padding: usize,
        argmax: Vec<usize>,
    },
    Softmax(Var),
    Elu(Var),
    Relu(Var),
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    MeanRows(Var),
    CumsumRows(Var),
    BroadcastRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        base: Var,
        rows: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    Mse(Var, Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Counters collected while a forward pass runs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Number of decoder passes executed.
    pub decoder_passes: usize,
    /// Attention budget summed over every sparse or dense kernel call.
    pub budget: ScoreBudget,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    pub stats: ForwardStats,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            stats: ForwardStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.zero_grad();
        self.push(t, Op::Leaf)
    }

    /// Binds a named parameter; repeated lookups of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.constant(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map2(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        self.map2(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        self.map2(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        self.map2(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| x * k).collect())?;
        Ok(self.push(t, Op::Scale(a, k)))
    }

    /// Elementwise product with a fixed (non-differentiable) buffer, e.g. a
    /// dropout mask.
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let va = self.value(a);
        if factors.len() != va.len() {
            return Err(Error::shape("mul_const", va.shape(), &[factors.len()]));
        }
        let t = Tensor::new(va.shape(), va.data().iter().zip(&factors).map(|(x, f)| x * f).collect())?;
        Ok(self.push(t, Op::MulConst(a, factors)))
    }

    /// `a [L×C] + bias` broadcast over rows; `bias` holds `C` values.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (l, c) = self.dims(a)?;
        let vb = self.value(bias);
        if vb.len() != c {
            return Err(Error::shape("add_row", self.shape(a), vb.shape()));
        }
        let b = vb.data();
        let mut data = self.value(a).data().to_vec();
        for r in 0..l {
            for j in 0..c {
                data[r * c + j] += b[j];
            }
        }
        let t = Tensor::new(&[l, c], data)?;
        Ok(self.push(t, Op::AddRow(a, bias)))
    }

    /// `a [L×C] ⊙ col [L×1]` broadcast across columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (l, c) = self.dims(a)?;
        if self.value(col).len() != l {
            return Err(Error::shape("mul_col", self.shape(a), self.shape(col)));
        }
        let s = self.value(col).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * s[i / c])
            .collect();
        let t = Tensor::new(&[l, c], data)?;
        Ok(self.push(t, Op::MulCol(a, col)))
    }

    /// Multiplies every entry of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let k = self.value(s).data()[0];
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| x * k).collect())?;
        Ok(self.push(t, Op::MulScalar(a, s)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = ops::matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], data)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a [m×k]`, `b [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let data = ops::matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], data)?;
        Ok(self.push(t, Op::MatMulNt(a, b)))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let t = ops::conv1d_time(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            padding,
        )?;
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                kernel,
                bias,
                padding,
            },
        ))
    }

    pub fn pool1d(&mut self, x: Var, kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (t, argmax) = ops::pool1d_with_index(self.value(x), kind, kernel, stride, padding)?;
        Ok(self.push(
            t,
            Op::Pool {
                x,
                kind,
                kernel,
                stride,
                padding,
                argmax,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = ops::softmax_lastdim(self.value(x), mask)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&a| ops::elu(a)).collect())?;
        Ok(self.push(t, Op::Elu(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&a| ops::relu(a)).collect())?;
        Ok(self.push(t, Op::Relu(x)))
    }

    /// Row lookup into `table [V×D]`; indices must already be validated.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims(table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(alloc::format!(
                "embedding index {bad} outside vocabulary {vocab}"
            )));
        }
        let tab = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&tab[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[idx.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Mean over time: `[L×C] → [1×C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (l, c) = self.dims(x)?;
        let mut out = vec![0.0; c];
        for r in self.value(x).data().chunks(c) {
            ops::axpy(1.0, r, &mut out);
        }
        out.iter_mut().for_each(|v| *v /= l as f64);
        let t = Tensor::new(&[1, c], out)?;
        Ok(self.push(t, Op::MeanRows(x)))
    }

    /// Inclusive cumulative sum over time.
    pub fn cumsum_rows(&mut self, x: Var) -> Result<Var> {
        let (l, c) = self.dims(x)?;
        let mut data = self.value(x).data().to_vec();
        for r in 1..l {
            let (prev, cur) = data.split_at_mut(r * c);
            ops::axpy(1.0, &prev[(r - 1) * c..], &mut cur[..c]);
        }
        let t = Tensor::new(&[l, c], data)?;
        Ok(self.push(t, Op::CumsumRows(x)))
    }

    /// Repeats a `[1×C]` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (one, c) = self.dims(x)?;
        if one != 1 {
            return Err(Error::shape("broadcast_rows", self.shape(x), &[1, c]));
        }
        let row = self.value(x).data();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(row);
        }
        let t = Tensor::new(&[rows, c], data)?;
        Ok(self.push(t, Op::BroadcastRows(x)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let l = self.dims(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (lp, c) = self.dims(p)?;
            if lp != l {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; l * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..l {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(&[l, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (l, c) = self.dims(x)?;
        if start + width > c || width == 0 {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, width]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(l * width);
        for r in 0..l {
            data.extend_from_slice(&src[r * c + start..r * c + start + width]);
        }
        let t = Tensor::new(&[l, width], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (l, c) = self.dims(x)?;
        if start + len > l || len == 0 {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let t = Tensor::new(&[len, c], self.value(x).data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (l, c) = self.dims(x)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= l) {
            return Err(Error::invalid("gather_rows index out of range"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(&[idx.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Copy of `base` with row `idx[r]` replaced by row `r` of `rows`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, rows: Var, idx: &[usize]) -> Result<Var> {
        let (l, c) = self.dims(base)?;
        let (n, c2) = self.dims(rows)?;
        if c != c2 || n != idx.len() || idx.iter().any(|&i| i >= l) {
            return Err(Error::shape("scatter_rows", self.shape(base), self.shape(rows)));
        }
        let mut data = self.value(base).data().to_vec();
        let src = self.value(rows).data();
        for (r, &i) in idx.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&src[r * c..(r + 1) * c]);
        }
        let t = Tensor::new(&[l, c], data)?;
        Ok(self.push(
            t,
            Op::ScatterRows {
                base,
                rows,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (l, c) = self.dims(x)?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (out, means, rstds) = ops::layer_norm_forward(
            self.value(x).data(),
            c,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let t = Tensor::new(&[l, c], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            },
        ))
    }

    /// Mean squared error, as a `[1]` tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.binary_same("mse", pred, target)?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let v = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        Ok(self.push(Tensor::new(&[1], vec![v])?, Op::Mse(pred, target)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data().iter().sum::<f64>();
        Ok(self.push(Tensor::new(&[1], vec![v])?, Op::Sum(x)))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every bound parameter into the store's grad
    /// slots. Parameters the loss does not reach receive zeros.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (name, &v) in &self.params {
            let t = store.get_mut(name)?;
            let slot = t.grad_mut();
            if let Some(g) = grads.get(v) {
                ops::axpy(1.0, g, slot);
            }
        }
        Ok(())
    }

    /// Names of the parameters bound into this graph.
    pub fn bound_params(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    fn propagate(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut acc = |v: Var, g: &[f64]| accumulate(grads, v, g);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, dy);
                acc(*b, dy);
            }
            Op::Sub(a, b) => {
                acc(*a, dy);
                let neg: Vec<f64> = dy.iter().map(|g| -g).collect();
                acc(*b, &neg);
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let ga: Vec<f64> = dy.iter().zip(vb).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = dy.iter().zip(va).map(|(g, x)| g * x).collect();
                acc(*a, &ga);
                acc(*b, &gb);
            }
            Op::Scale(a, k) => {
                let g: Vec<f64> = dy.iter().map(|g| g * k).collect();
                acc(*a, &g);
            }
            Op::MulConst(a, f) => {
                let g: Vec<f64> = dy.iter().zip(f).map(|(g, k)| g * k).collect();
                acc(*a, &g);
            }
            Op::AddRow(a, bias) => {
                let c = self.value(*bias).len();
                let mut gb = vec![0.0; c];
                for r in dy.chunks(c) {
                    ops::axpy(1.0, r, &mut gb);
                }
                acc(*a, dy);
                acc(*bias, &gb);
            }
            Op::MulCol(a, col) => {
                let s = self.value(*col).data();
                let va = self.value(*a).data();
                let c = va.len() / s.len();
                let ga: Vec<f64> = dy.iter().enumerate().map(|(i, g)| g * s[i / c]).collect();
                let gs: Vec<f64> = (0..s.len())
                    .map(|r| ops::dot(&dy[r * c..(r + 1) * c], &va[r * c..(r + 1) * c]))
                    .collect();
                acc(*a, &ga);
                acc(*col, &gs);
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).data()[0];
                let ga: Vec<f64> = dy.iter().map(|g| g * k).collect();
                let gs = ops::dot(dy, self.value(*a).data());
                acc(*a, &ga);
                acc(*s, &[gs]);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.1;
                // dA = dY·Bᵀ, dB = Aᵀ·dY
                let ga = ops::matmul_nt_raw(dy, self.value(*b).data(), m, n, k);
                let gb = ops::matmul_tn_raw(self.value(*a).data(), dy, m, k, n);
                acc(*a, &ga);
                acc(*b, &gb);
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.0;
                // Y = A·Bᵀ: dA = dY·B, dB = dYᵀ·A
                let ga = ops::matmul_raw(dy, self.value(*b).data(), m, n, k);
                let gb = ops::matmul_tn_raw(dy, self.value(*a).data(), m, n, k);
                acc(*a, &ga);
                acc(*b, &gb);
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                padding,
            } => {
                let (dx, dw, db) =
                    ops::conv1d_time_backward(self.value(*x), self.value(*kernel), *padding, dy)?;
                acc(*x, &dx);
                acc(*kernel, &dw);
                if let Some(b) = bias {
                    acc(*b, &db);
                }
            }
            Op::Pool {
                x,
                kind,
                kernel,
                stride,
                padding,
                argmax,
            } => {
                let dims = self.dims(*x)?;
                let dx = ops::pool1d_backward(dims, *kind, *kernel, *stride, *padding, argmax, dy);
                acc(*x, &dx);
            }
            Op::Softmax(x) => {
                let cols = *node.value.shape().last().expect("shape");
                let dx = ops::softmax_backward(node.value.data(), dy, cols);
                acc(*x, &dx);
            }
            Op::Elu(x) => {
                let g: Vec<f64> = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| g * ops::elu_grad(v))
                    .collect();
                acc(*x, &g);
            }
            Op::Relu(x) => {
                let g: Vec<f64> = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, &g);
            }
            Op::Embedding { table, idx } => {
                let (vocab, d) = self.dims(*table)?;
                let mut gt = vec![0.0; vocab * d];
                for (r, &i) in idx.iter().enumerate() {
                    ops::axpy(1.0, &dy[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                }
                acc(*table, &gt);
            }
            Op::MeanRows(x) => {
                let (l, c) = self.dims(*x)?;
                let inv = 1.0 / l as f64;
                let mut g = Vec::with_capacity(l * c);
                for _ in 0..l {
                    g.extend(dy.iter().map(|v| v * inv));
                }
                acc(*x, &g);
            }
            Op::CumsumRows(x) => {
                let (l, c) = self.dims(*x)?;
                // reverse cumulative sum
                let mut g = dy.to_vec();
                for r in (0..l.saturating_sub(1)).rev() {
                    let (cur, next) = g.split_at_mut((r + 1) * c);
                    ops::axpy(1.0, &next[..c], &mut cur[r * c..]);
                }
                acc(*x, &g);
            }
            Op::BroadcastRows(x) => {
                let c = self.value(*x).len();
                let mut g = vec![0.0; c];
                for r in dy.chunks(c) {
                    ops::axpy(1.0, r, &mut g);
                }
                acc(*x, &g);
            }
            Op::ConcatCols(parts) => {
                let (l, total) = node.value.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p)?.1;
                    let mut g = Vec::with_capacity(l * w);
                    for r in 0..l {
                        g.extend_from_slice(&dy[r * total + off..r * total + off + w]);
                    }
                    acc(p, &g);
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (l, c) = self.dims(*x)?;
                let w = node.value.cols();
                let mut g = vec![0.0; l * c];
                for r in 0..l {
                    g[r * c + start..r * c + start + w].copy_from_slice(&dy[r * w..(r + 1) * w]);
                }
                acc(*x, &g);
            }
            Op::SliceRows { x, start } => {
                let (l, c) = self.dims(*x)?;
                let mut g = vec![0.0; l * c];
                g[start * c..start * c + dy.len()].copy_from_slice(dy);
                acc(*x, &g);
            }
            Op::GatherRows { x, idx } => {
                let (l, c) = self.dims(*x)?;
                let mut g = vec![0.0; l * c];
                for (r, &i) in idx.iter().enumerate() {
                    ops::axpy(1.0, &dy[r * c..(r + 1) * c], &mut g[i * c..(i + 1) * c]);
                }
                acc(*x, &g);
            }
            Op::ScatterRows { base, rows, idx } => {
                let c = node.value.cols();
                let mut gb = dy.to_vec();
                let mut gr = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    gr.extend_from_slice(&dy[i * c..(i + 1) * c]);
                    gb[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                }
                acc(*base, &gb);
                acc(*rows, &gr);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            } => {
                let c = node.value.cols();
                let (dx, dg, db) = ops::layer_norm_backward(
                    self.value(*x).data(),
                    c,
                    self.value(*gain).data(),
                    means,
                    rstds,
                    dy,
                );
                acc(*x, &dx);
                acc(*gain, &dg);
                acc(*bias, &db);
            }
            Op::Mse(p, t) => {
                let pv = self.value(*p).data();
                let tv = self.value(*t).data();
                let k = 2.0 * dy[0] / pv.len() as f64;
                let gp: Vec<f64> = pv.iter().zip(tv).map(|(a, b)| k * (a - b)).collect();
                let gt: Vec<f64> = gp.iter().map(|g| -g).collect();
                acc(*p, &gp);
                acc(*t, &gt);
            }
            Op::Sum(x) => {
                let g = vec![dy[0]; self.value(*x).len()];
                acc(*x, &g);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => ops::axpy(1.0, g, buf),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_matmul_and_sum() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.value(s).data(), &[11.0]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_param_accumulates_from_both_uses() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        assert_eq!(w, w2);
        let y = g.mul(w, w2).unwrap();
        let grads = g.backward(y).unwrap();
        g.accumulate_param_grads(&grads, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[6.0]);
    }

    #[test]
    fn scatter_over_fill_routes_gradients() {
        let mut g = Graph::new();
        let base = g.constant(Tensor::zeros(&[3, 1]));
        let rows = g.constant(Tensor::new(&[1, 1], vec![5.0]).unwrap());
        let y = g.scatter_rows(base, rows, &[1]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 5.0, 0.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(base).unwrap(), &[1.0, 0.0, 1.0]);
        assert_eq!(grads.get(rows).unwrap(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        assert!(g.backward(a).is_err());
    }
}
