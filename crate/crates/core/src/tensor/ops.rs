//! Forward kernels shared by the tape and by plain tensor callers.

use super::Tensor;
use crate::error::{Error, Result};

/// Strided view of a row-major matrix: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn dense(rows: usize, cols: usize) -> Self {
        MatView {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a·b + beta·c` over strided views.
pub(crate) fn gemm(a: &[f64], av: MatView, b: &[f64], bv: MatView, c: &mut [f64], beta: f64) {
    debug_assert_eq!(av.cols, bv.rows);
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    debug_assert!(c.len() >= m * n);
    // SAFETY: every view addresses memory inside the slices it is paired with
    // (checked by the debug assertions at the call sites' shape validation),
    // and `c` does not alias `a` or `b` because it is a unique borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard matrix product of `R×K` and `K×C` operands.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; r * c];
    gemm(
        a.data(),
        MatView::dense(r, k),
        b.data(),
        MatView::dense(k, c),
        &mut out,
        0.0,
    );
    Tensor::new(vec![r, c], out)
}

/// Batched product `[S,R,K]·[S,K,C]`, or `[S,R,K]·[S,C,K]ᵀ` when `trans_b`.
pub fn bmm(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let dim_err = || Error::Dimension {
        op: "bmm",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(dim_err());
    }
    let (s, r, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bk, c) = if trans_b {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    if bk != k {
        return Err(dim_err());
    }
    let mut out = vec![0.0; s * r * c];
    let bview = if trans_b {
        MatView::dense(c, k).t()
    } else {
        MatView::dense(k, c)
    };
    for i in 0..s {
        gemm(
            &a.data()[i * r * k..(i + 1) * r * k],
            MatView::dense(r, k),
            &b.data()[i * k * c..(i + 1) * k * c],
            bview,
            &mut out[i * r * c..(i + 1) * r * c],
            0.0,
        );
    }
    Tensor::new(vec![s, r, c], out)
}

/// Softmax over the last axis, computed with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let d = *x.shape().last().expect("tensor has at least one axis");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

/// Output of a layer-norm forward pass with the statistics needed for backward.
pub(crate) struct LayerNormParts {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_parts(x: &[f64], d: usize, gain: &[f64], bias: &[f64], eps: f64) -> LayerNormParts {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    LayerNormParts { out, xhat, rstd }
}

pub(crate) fn check_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<usize> {
    let d = *x.shape().last().expect("tensor has at least one axis");
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::contract(format!("layer_norm eps must be > 0, got {eps}")));
    }
    Ok(d)
}

/// Normalizes each last-axis slice to zero mean and unit (population)
/// variance, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = check_layer_norm(x, gain, bias, eps)?;
    let parts = layer_norm_parts(x.data(), d, gain.data(), bias.data(), eps);
    Tensor::new(x.shape().to_vec(), parts.out)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

/// Right-aligned broadcast of two shapes (numpy rules).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid into `out` space, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast result.
pub(crate) fn for_each_broadcast(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    // Fast path: `b` equals a suffix of `a == out` (bias and table adds).
    if a == out && b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        let m: usize = b.iter().product();
        for i in 0..n {
            f(i, i, i % m);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let mut idx = vec![0usize; out.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let n = out_shape.iter().product();
    let mut out = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.shape(), b.shape(), &out_shape, |o, i, j| {
        out[o] = f(ad[i], bd[j]);
    });
    Tensor::new(out_shape, out)
}

/// Permutes axes: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::contract(format!(
            "permute axes {axes:?} invalid for rank {rank}"
        )));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let data = x.data();
    // Inner axis handled as a strided run for speed.
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer = n / inner;
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
