//! Forward primitives over time-major matrices (`[L × C]`), and the
//! matching vector-Jacobian kernels the tape calls during backward.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PoolKind {
    Max,
    Avg,
}

/// Output length of a 1-D sliding window.
pub fn pooled_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = len + 2 * padding;
    if kernel == 0 || stride == 0 || span < kernel {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

fn conv_dims(x: &Tensor, kernel: &Tensor, padding: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (len, c_in) = x.dims2()?;
    let &[c_out, k_in, k] = kernel.shape() else {
        return Err(Error::invalid(format!(
            "conv kernel must be rank 3, got {:?}",
            kernel.shape()
        )));
    };
    if k_in != c_in {
        return Err(Error::shape("conv1d_time", x.shape(), kernel.shape()));
    }
    if k % 2 == 0 {
        return Err(Error::invalid(format!("conv kernel width {k} must be odd")));
    }
    if len + 2 * padding < k {
        return Err(Error::shape("conv1d_time", x.shape(), kernel.shape()));
    }
    Ok((len, c_in, c_out, k, len + 2 * padding - k + 1))
}

/// Cross-correlation along time with zero padding.
///
/// `x` is `[L × C_in]`, `kernel` is `[C_out × C_in × k]`, `bias` (optional)
/// has `C_out` entries. Output is `[L + 2·padding − k + 1 × C_out]`.
pub fn conv1d_time(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
    let (len, c_in, c_out, k, out_len) = conv_dims(x, kernel, padding)?;
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape("conv1d_time bias", b.shape(), &[c_out]));
        }
    }
    // [k][c_out][c_in] so the inner loop walks contiguous memory on both sides
    let w = kernel.data();
    let mut wt = vec![0.0; k * c_out * c_in];
    for o in 0..c_out {
        for i in 0..c_in {
            for tap in 0..k {
                wt[(tap * c_out + o) * c_in + i] = w[(o * c_in + i) * k + tap];
            }
        }
    }
    let xs = x.data();
    let mut out = vec![0.0; out_len * c_out];
    for t in 0..out_len {
        let row = &mut out[t * c_out..(t + 1) * c_out];
        if let Some(b) = bias {
            row.copy_from_slice(b.data());
        }
        for tap in 0..k {
            let src = t + tap;
            if src < padding || src - padding >= len {
                continue;
            }
            let xr = &xs[(src - padding) * c_in..(src - padding + 1) * c_in];
            for (o, acc) in row.iter_mut().enumerate() {
                let wr = &wt[(tap * c_out + o) * c_in..(tap * c_out + o + 1) * c_in];
                *acc += dot(wr, xr);
            }
        }
    }
    Tensor::new(&[out_len, c_out], out)
}

/// Gradients of [`conv1d_time`] with respect to input, kernel and bias.
pub(crate) fn conv1d_time_backward(
    x: &Tensor,
    kernel: &Tensor,
    padding: usize,
    dy: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (len, c_in, c_out, k, out_len) = conv_dims(x, kernel, padding)?;
    let xs = x.data();
    let w = kernel.data();
    let mut dx = vec![0.0; len * c_in];
    let mut dw = vec![0.0; c_out * c_in * k];
    let mut db = vec![0.0; c_out];
    for t in 0..out_len {
        let g = &dy[t * c_out..(t + 1) * c_out];
        for (o, gv) in g.iter().enumerate() {
            db[o] += gv;
        }
        for tap in 0..k {
            let src = t + tap;
            if src < padding || src - padding >= len {
                continue;
            }
            let s = src - padding;
            let xr = &xs[s * c_in..(s + 1) * c_in];
            for (o, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                for i in 0..c_in {
                    let wi = (o * c_in + i) * k + tap;
                    dx[s * c_in + i] += w[wi] * gv;
                    dw[wi] += xr[i] * gv;
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Per-channel pooling along time.
///
/// Zero padding never wins a max and never enters an average's divisor.
pub fn pool1d(x: &Tensor, kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    Ok(pool1d_with_index(x, kind, kernel, stride, padding)?.0)
}

/// Pooling plus, for max pooling, the source row of every output entry.
pub(crate) fn pool1d_with_index(
    x: &Tensor,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (len, c) = x.dims2()?;
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("pool kernel and stride must be positive"));
    }
    let out_len = match pooled_len(len, kernel, stride, padding) {
        Some(n) if n >= 1 => n,
        _ => return Err(Error::TooShortToPool),
    };
    let xs = x.data();
    let mut out = vec![0.0; out_len * c];
    let mut arg = Vec::new();
    if kind == PoolKind::Max {
        arg = vec![0usize; out_len * c];
    }
    for t in 0..out_len {
        let start = (t * stride) as isize - padding as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + kernel as isize).min(len as isize)).max(0) as usize;
        if lo >= hi {
            return Err(Error::TooShortToPool);
        }
        for ch in 0..c {
            match kind {
                PoolKind::Max => {
                    let mut best = lo;
                    for s in lo + 1..hi {
                        if xs[s * c + ch] > xs[best * c + ch] {
                            best = s;
                        }
                    }
                    out[t * c + ch] = xs[best * c + ch];
                    arg[t * c + ch] = best;
                }
                PoolKind::Avg => {
                    let sum: f64 = (lo..hi).map(|s| xs[s * c + ch]).sum();
                    out[t * c + ch] = sum / (hi - lo) as f64;
                }
            }
        }
    }
    Ok((Tensor::new(&[out_len, c], out)?, arg))
}

pub(crate) fn pool1d_backward(
    input_shape: (usize, usize),
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    padding: usize,
    argmax: &[usize],
    dy: &[f64],
) -> Vec<f64> {
    let (len, c) = input_shape;
    let out_len = dy.len() / c;
    let mut dx = vec![0.0; len * c];
    for t in 0..out_len {
        match kind {
            PoolKind::Max => {
                for ch in 0..c {
                    dx[argmax[t * c + ch] * c + ch] += dy[t * c + ch];
                }
            }
            PoolKind::Avg => {
                let start = (t * stride) as isize - padding as isize;
                let lo = start.max(0) as usize;
                let hi = ((start + kernel as isize).min(len as isize)).max(0) as usize;
                let inv = 1.0 / (hi - lo) as f64;
                for s in lo..hi {
                    for ch in 0..c {
                        dx[s * c + ch] += dy[t * c + ch] * inv;
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise softmax over the last axis.
///
/// `mask[i]` set means entry `i` (row-major) is forbidden; forbidden
/// entries come out as exactly zero.
pub fn softmax_lastdim(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let cols = *x.shape().last().expect("non-empty shape");
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::shape("softmax mask", x.shape(), &[m.len()]));
        }
    }
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(cols).enumerate() {
        let allowed = |j: usize| mask.is_none_or(|m| !m[r * cols + j]);
        softmax_row(row, allowed).map_err(|_| Error::EmptyAttentionRow { row: r })?;
    }
    Tensor::new(x.shape(), out)
}

/// In-place stabilized softmax of one row; `allowed(j)` gates entries.
pub(crate) fn softmax_row(row: &mut [f64], allowed: impl Fn(usize) -> bool) -> core::result::Result<(), ()> {
    let mut max = f64::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if allowed(j) && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = libm::exp(*v - max);
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
    Ok(())
}

pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let s = dot(yr, gr);
        for j in 0..cols {
            dr[j] = yr[j] * (gr[j] - s);
        }
    }
    dx
}

pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        libm::expm1(v)
    }
}

pub fn elu_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        libm::exp(v)
    }
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `a [m×k] · b [k×n]` into a fresh buffer.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
    out
}

/// `a [m×k] · bᵀ` with `b [n×k]`.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `aᵀ [k×m]ᵀ · b [m×n]` with `a [m×k]`, giving `[k×n]`.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

/// Layer normalization over the last axis; returns output, per-row mean and
/// reciprocal standard deviation.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut means = vec![0.0; rows];
    let mut rstds = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / libm::sqrt(var + eps);
        for j in 0..cols {
            out[r * cols + j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
        }
        means[r] = mean;
        rstds[r] = rstd;
    }
    (out, means, rstds)
}

pub(crate) fn layer_norm_backward(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    means: &[f64],
    rstds: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut dx = vec![0.0; x.len()];
    let mut dg = vec![0.0; cols];
    let mut db = vec![0.0; cols];
    let n = cols as f64;
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let gr = &dy[r * cols..(r + 1) * cols];
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..cols {
            let xhat = (xr[j] - mean) * rstd;
            let g = gr[j] * gain[j];
            dg[j] += gr[j] * xhat;
            db[j] += gr[j];
            sum_g += g;
            sum_gx += g * xhat;
        }
        for j in 0..cols {
            let xhat = (xr[j] - mean) * rstd;
            let g = gr[j] * gain[j];
            dx[r * cols + j] = rstd * (g - sum_g / n - xhat * sum_gx / n);
        }
    }
    (dx, dg, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::column(v).unwrap()
    }

    #[test]
    fn conv_ones_kernel_sums_neighbours() {
        let y = conv1d_time(&Tensor::ones(&[5, 1]), &Tensor::ones(&[1, 1, 3]), None, 1).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn conv_identity_tap_and_zero_input() {
        let x = Tensor::new(&[4, 1], vec![0.3, -1.0, 2.5, 7.0]).unwrap();
        let k = Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(conv1d_time(&x, &k, None, 1).unwrap(), x);
        let z = conv1d_time(&Tensor::zeros(&[4, 2]), &Tensor::ones(&[3, 2, 3]), None, 1).unwrap();
        assert_eq!(z.shape(), &[4, 3]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let err = conv1d_time(&Tensor::zeros(&[4, 2]), &Tensor::ones(&[1, 3, 3]), None, 1).unwrap_err();
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains("[4, 2]") && msg.contains("[1, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_output_length_law() {
        let y = conv1d_time(&Tensor::ones(&[10, 1]), &Tensor::ones(&[1, 1, 5]), None, 0).unwrap();
        assert_eq!(y.rows(), 6);
    }

    #[test]
    fn pool_examples() {
        let x = col(&[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(pool1d(&x, PoolKind::Max, 3, 2, 1).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(pool1d(&x, PoolKind::Avg, 3, 2, 1).unwrap().data(), &[2.0, 3.0]);
        let x = col(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool1d(&x, PoolKind::Avg, 2, 2, 0).unwrap().data(), &[1.5, 3.5]);
        let c = Tensor::full(&[7, 2], 4.25);
        let y = pool1d(&c, PoolKind::Avg, 3, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 4.25));
        assert_eq!(
            pool1d(&col(&[1.0]), PoolKind::Max, 3, 1, 0).unwrap_err(),
            Error::TooShortToPool
        );
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_lastdim(&Tensor::zeros(&[1, 3]), None).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_lastdim(&Tensor::new(&[1, 2], vec![libm::log(2.0), 0.0]).unwrap(), None).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let x = Tensor::new(&[1, 2], vec![5.0, 7.0]).unwrap();
        let y = softmax_lastdim(&x, Some(&[false, true])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
        assert_eq!(
            softmax_lastdim(&x, Some(&[true, true])).unwrap_err(),
            Error::EmptyAttentionRow { row: 0 }
        );
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-5.0f64..5.0, rows * cols)
            .prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(x in matrix(4, 6), mask in proptest::collection::vec(any::<bool>(), 24)) {
            let mut mask = mask;
            for r in 0..4 { mask[r * 6] = false; }
            let y = softmax_lastdim(&x, Some(&mask)).unwrap();
            for r in 0..4 {
                let s: f64 = y.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                for j in 0..6 {
                    if mask[r * 6 + j] { prop_assert_eq!(y.at(r, j), 0.0); }
                }
            }
        }

        #[test]
        fn conv_is_linear(x1 in matrix(6, 2), x2 in matrix(6, 2), w in proptest::collection::vec(-1.0f64..1.0, 18), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let k = Tensor::new(&[3, 2, 3], w).unwrap();
            let mix: Vec<f64> = x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect();
            let lhs = conv1d_time(&Tensor::new(&[6, 2], mix).unwrap(), &k, None, 1).unwrap();
            let y1 = conv1d_time(&x1, &k, None, 1).unwrap();
            let y2 = conv1d_time(&x2, &k, None, 1).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs.data()[i] - (a * y1.data()[i] + b * y2.data()[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn max_pool_dominates_avg_pool(x in matrix(9, 3), k in 1usize..4, s in 1usize..3) {
            let p = k / 2;
            let mx = pool1d(&x, PoolKind::Max, k, s, p).unwrap();
            let av = pool1d(&x, PoolKind::Avg, k, s, p).unwrap();
            for (m, a) in mx.data().iter().zip(av.data()) {
                prop_assert!(m >= a);
            }
        }
    }
}
