//! Forward kernels shared by the recording graph and the eager executor.
//!
//! Every kernel validates shapes and returns a fresh tensor; none of them
//! broadcast except where noted.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const RMS_EPS: f64 = 1e-6;

/// How a stored operand is read by [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Row-major as stored.
    Plain,
    /// Read as the transpose of the stored row-major matrix.
    Transposed,
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`. With `Layout::Transposed`, `a`
/// is stored as `k x m` (likewise `b` as `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Plain => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Plain => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), Layout::Plain, b.data(), Layout::Plain, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

/// `scale * a * b^T` with `a: [m x k]`, `b: [n x k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, scale, a.data(), Layout::Plain, b.data(), Layout::Transposed, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adds a `[n]` bias to every row of a `[..., n]` tensor (the only broadcast supported).
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if bias.shape() != [n] {
        return Err(Error::shape("add_bias", format!("{:?} + {:?}", x.shape(), bias.shape())));
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n) {
        row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
    }
    Tensor::new(x.shape().to_vec(), data)
}

pub fn scale(x: &Tensor, s: f64) -> Tensor {
    let data = x.data().iter().map(|v| v * s).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Root-mean-square normalisation over contiguous groups of `group` values
/// along the trailing axis. `group == last_dim` is the ordinary per-row norm;
/// smaller groups normalise each attention head independently.
///
/// Returns the output and the per-group reciprocal RMS.
pub fn rmsnorm(x: &Tensor, gain: Option<&Tensor>, group: usize) -> Result<(Tensor, Vec<f64>)> {
    let last = x.last_dim();
    if group == 0 || !last.is_multiple_of(group) {
        return Err(Error::shape("rmsnorm", format!("group {group} does not divide {last}")));
    }
    if let Some(g) = gain {
        if g.shape() != [group] {
            return Err(Error::shape("rmsnorm", format!("gain {:?} for group {group}", g.shape())));
        }
    }
    let mut out = x.data().to_vec();
    let mut inv = Vec::with_capacity(out.len() / group);
    for chunk in out.chunks_mut(group) {
        let ms = chunk.iter().map(|v| v * v).sum::<f64>() / group as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(r);
        match gain {
            Some(g) => chunk.iter_mut().zip(g.data()).for_each(|(v, gi)| *v *= r * gi),
            None => chunk.iter_mut().for_each(|v| *v *= r),
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv))
}

/// Inverse frequencies `base^(-2i/head_dim)` for `i in 0..head_dim/2`.
pub fn rotary_inv_freq(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect()
}

/// Rotates each consecutive pair `(2i, 2i+1)` inside every `head_dim`-wide group
/// of row `t` by `positions[t] * inv_freq[i]`. `sign = -1` applies the inverse.
pub fn rotary(
    x: &Tensor,
    positions: &[usize],
    head_dim: usize,
    inv_freq: &[f64],
    sign: f64,
) -> Result<Tensor> {
    if !head_dim.is_multiple_of(2) {
        return Err(Error::shape("rotary", format!("head dim {head_dim} is odd")));
    }
    let last = x.last_dim();
    if !last.is_multiple_of(head_dim) {
        return Err(Error::shape("rotary", format!("head dim {head_dim} does not divide {last}")));
    }
    if positions.len() != x.outer() {
        return Err(Error::shape(
            "rotary",
            format!("{} positions for {} rows", positions.len(), x.outer()),
        ));
    }
    let mut out = x.data().to_vec();
    let mut cos = vec![0.0; head_dim / 2];
    let mut sin = vec![0.0; head_dim / 2];
    for (row, &pos) in out.chunks_mut(last).zip(positions) {
        for (i, f) in inv_freq.iter().enumerate() {
            let angle = pos as f64 * f;
            cos[i] = angle.cos();
            sin[i] = sign * angle.sin();
        }
        for head in row.chunks_mut(head_dim) {
            for i in 0..head_dim / 2 {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos[i] - b * sin[i];
                head[2 * i + 1] = a * sin[i] + b * cos[i];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Softmax along `axis` with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (out[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Row softmax over the trailing axis where `visible[i * cols + j] == false`
/// entries get exactly zero weight.
pub fn masked_softmax(x: &Tensor, visible: Option<&[bool]>) -> Result<Tensor> {
    let cols = x.last_dim();
    if let Some(mask) = visible {
        if mask.len() != x.numel() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} for {:?}", mask.len(), x.shape()),
            ));
        }
    }
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(cols).enumerate() {
        let vis = visible.map(|m| &m[r * cols..(r + 1) * cols]);
        let allowed = |j: usize| vis.is_none_or(|v| v[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            if allowed(j) && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if allowed(j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn gather_rows(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let (vocab, d) = table.dims2("gather_rows")?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        out.extend_from_slice(table.row(id as usize));
    }
    Tensor::new(vec![ids.len(), d], out)
}

pub fn slice(x: &Tensor, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Tensor> {
    let (r, c) = x.dims2("slice")?;
    if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
        return Err(Error::shape("slice", format!("[{rows:?}, {cols:?}] of [{r}x{c}]")));
    }
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for i in rows.clone() {
        out.extend_from_slice(&x.data()[i * c + cols.start..i * c + cols.end]);
    }
    Tensor::new(vec![rows.len(), cols.len()], out)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no parts"))?;
    let (rows, _) = first.dims2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.dims2("concat_cols")?;
        if r != rows {
            return Err(Error::shape("concat_cols", format!("{r} rows vs {rows}")));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![rows, total], out)
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no parts"))?;
    let (_, cols) = first.dims2("concat_rows")?;
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let (r, c) = p.dims2("concat_rows")?;
        if c != cols {
            return Err(Error::shape("concat_rows", format!("{c} cols vs {cols}")));
        }
        rows += r;
        out.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], out)
}

/// Log-sum-exp of every row of a matrix.
pub fn row_logsumexp(logits: &Tensor) -> Vec<f64> {
    let cols = logits.last_dim();
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Per-position log-probability of `targets` under row-wise softmax of `logits`.
pub fn target_log_probs(logits: &Tensor, targets: &[u32]) -> Result<Vec<f64>> {
    let (rows, vocab) = logits.dims2("target_log_probs")?;
    if rows != targets.len() {
        return Err(Error::shape("target_log_probs", format!("{rows} rows, {} targets", targets.len())));
    }
    let lse = row_logsumexp(logits);
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            Ok(logits.get2(i, t as usize) - lse[i])
        })
        .collect()
}

/// Per-position `1 / p(target)`, computed as a ratio of shifted exponentials
/// rather than through a log. Infinite when the target probability underflows.
pub fn target_inverse_probs(logits: &Tensor, targets: &[u32]) -> Result<Vec<f64>> {
    let (rows, vocab) = logits.dims2("target_inverse_probs")?;
    if rows != targets.len() {
        return Err(Error::shape("target_inverse_probs", format!("{rows} rows, {} targets", targets.len())));
    }
    logits
        .data()
        .chunks(vocab)
        .zip(targets)
        .map(|(row, &t)| {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            Ok(z / (row[t as usize] - max).exp())
        })
        .collect()
}

/// Masked mean next-token cross-entropy plus the z-loss penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub z_loss: f64,
    pub tokens: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.nll + self.z_loss
    }
}

pub fn lm_loss(logits: &Tensor, targets: &[u32], mask: &[bool], z_coef: f64) -> Result<LossParts> {
    let (rows, vocab) = logits.dims2("lm_loss")?;
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape(
            "lm_loss",
            format!("{rows} rows, {} targets, {} mask", targets.len(), mask.len()),
        ));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::AllMasked);
    }
    let lse = row_logsumexp(logits);
    let (mut nll, mut z) = (0.0, 0.0);
    for i in (0..rows).filter(|&i| mask[i]) {
        let t = targets[i] as usize;
        if t >= vocab {
            return Err(Error::TokenOutOfRange { id: targets[i], vocab });
        }
        nll += lse[i] - logits.get2(i, t);
        z += lse[i] * lse[i];
    }
    Ok(LossParts { nll: nll / count as f64, z_loss: z_coef * z / count as f64, tokens: count })
}

pub fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}
