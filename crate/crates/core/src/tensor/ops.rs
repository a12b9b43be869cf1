//! Forward kernels and their vector-Jacobian products.
//!
//! These are plain functions over tensors and slices; [`Graph`](super::Graph)
//! records them on the tape. The memory layer calls them directly in its own
//! fused backward.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-6;
/// Stabiliser for L2 normalisation in qk-norm.
pub const L2_EPS: f64 = 1e-6;

fn as_matrix<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `c[m×p] = beta*c + a·b`, with optional transposition of the row-major inputs.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×p`
/// (or `p×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm_into<T: Scalar>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    p: usize,
    beta: T,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * p);
    assert_eq!(c.len(), m * p);
    if m == 0 || p == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (p as isize, 1) };
    // SAFETY: lengths asserted above; strides describe exactly those buffers and
    // `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            p,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

/// Matrix product of `a[m×k]` and `b[k×p]`; leading extents of `a` are flattened.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a);
    if b.shape().len() != 2 {
        return Err(Error::dim(format!("rhs must be 2-d, got {:?}", b.shape())));
    }
    let (kb, p) = (b.shape()[0], b.shape()[1]);
    if k != kb {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * p];
    gemm_into(a.data(), false, b.data(), false, &mut out, m, k, p, T::zero());
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = p;
    Ok(Tensor::from_parts(shape, out))
}

/// Softmax of a single row with max subtraction.
pub fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = T::one() / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// `dx = y ⊙ (dy − ⟨y, dy⟩)` for one row.
pub fn softmax_row_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d += yi * (gi - dot);
    }
}

pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::dim("softmax over empty rows"));
    }
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        softmax_row(src, dst);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn silu_scalar<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

/// d silu / dx = σ(x) + x σ(x) (1 − σ(x)).
pub fn silu_grad_scalar<T: Scalar>(v: T) -> T {
    let s = sigmoid(v);
    s + v * s * (T::one() - s)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| silu_scalar(v)).collect(),
    )
}

/// `x / sqrt(mean(x²) + ε) · weight`, row-wise. Returns output and per-row 1/rms.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let d = x.cols();
    if weight.len() != d {
        return Err(Error::dim(format!(
            "rms_norm weight has {} entries, rows have {d}",
            weight.len()
        )));
    }
    let eps = T::from_f64(RMS_EPS);
    let dt = T::from_f64(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.rows());
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let ms = src.iter().map(|&v| v * v).sum::<T>() / dt;
        let r = T::one() / (ms + eps).sqrt();
        for ((o, &v), &w) in dst.iter_mut().zip(src).zip(weight.data()) {
            *o = v * r * w;
        }
        inv.push(r);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), inv))
}

/// Accumulates `dx` and `dw` for one rms-norm row.
pub fn rms_norm_row_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    inv_rms: T,
    dy: &[T],
    dx: &mut [T],
    dw: Option<&mut [T]>,
) {
    let d = T::from_f64(x.len() as f64);
    let dot: T = x.iter().zip(w).zip(dy).map(|((&xi, &wi), &gi)| xi * wi * gi).sum();
    let coef = inv_rms * inv_rms * inv_rms * dot / d;
    for i in 0..x.len() {
        dx[i] += inv_rms * w[i] * dy[i] - x[i] * coef;
    }
    if let Some(dw) = dw {
        for i in 0..x.len() {
            dw[i] += x[i] * inv_rms * dy[i];
        }
    }
}

/// `v / sqrt(|v|² + ε)`; returns the scale `1/sqrt(|v|²+ε)`.
pub fn l2_normalize_into<T: Scalar>(v: &[T], out: &mut [T]) -> T {
    let sq: T = v.iter().map(|&a| a * a).sum();
    let r = T::one() / (sq + T::from_f64(L2_EPS)).sqrt();
    for (o, &a) in out.iter_mut().zip(v) {
        *o = a * r;
    }
    r
}

/// VJP of [`l2_normalize_into`]: `dv += r·du − v·r³·⟨v, du⟩`.
pub fn l2_normalize_backward<T: Scalar>(v: &[T], r: T, du: &[T], dv: &mut [T]) {
    let dot: T = v.iter().zip(du).map(|(&a, &b)| a * b).sum();
    let r3 = r * r * r;
    for i in 0..v.len() {
        dv[i] += r * du[i] - v[i] * r3 * dot;
    }
}

/// Mean negative log-likelihood of `targets`; also returns row softmax probabilities.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Vec<T>)> {
    let v = logits.cols();
    let b = logits.rows();
    if targets.len() != b {
        return Err(Error::dim(format!("{} targets for {b} rows", targets.len())));
    }
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = 0.0f64;
    for ((row, dst), &t) in logits.data().chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
        if t >= v {
            return Err(Error::Index { index: t, bound: v });
        }
        // log-sum-exp in the working precision, accumulated in f64 across rows
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        total += (lse - row[t]).as_f64();
        softmax_row(row, dst);
    }
    let loss = if b == 0 { 0.0 } else { total / b as f64 };
    Ok((T::from_f64(loss), probs))
}

/// Causal multi-head attention over `batch` sequences of length `seq`.
///
/// `q`, `k`, `v` are `[batch·seq × d_model]`; heads split `d_model` evenly.
/// Returns the output and the attention probabilities
/// `[batch × heads × seq × seq]` (zero above the diagonal).
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    d_model: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d_model / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut out = vec![T::zero(); batch * seq * d_model];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut scores = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for t in 0..seq {
                let qt = &q[(b * seq + t) * d_model + off..][..dh];
                for u in 0..=t {
                    let ku = &k[(b * seq + u) * d_model + off..][..dh];
                    scores[u] = qt.iter().zip(ku).map(|(&x, &y)| x * y).sum::<T>() * scale;
                }
                let p = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                softmax_row(&scores[..=t], &mut p[..=t]);
                let o = &mut out[(b * seq + t) * d_model + off..][..dh];
                for u in 0..=t {
                    let vu = &v[(b * seq + u) * d_model + off..][..dh];
                    let w = p[u];
                    o.iter_mut().zip(vu).for_each(|(a, &x)| *a += w * x);
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    d_model: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d_model / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); seq];
    let mut ds = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for t in 0..seq {
                let row = (b * seq + t) * d_model + off;
                let go = &grad_out[row..][..dh];
                let p = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                for u in 0..=t {
                    let urow = (b * seq + u) * d_model + off;
                    dp[u] = go.iter().zip(&v[urow..][..dh]).map(|(&a, &x)| a * x).sum();
                    for (d, &g) in dv[urow..][..dh].iter_mut().zip(go) {
                        *d += p[u] * g;
                    }
                }
                ds[..=t].iter_mut().for_each(|x| *x = T::zero());
                softmax_row_backward(&p[..=t], &dp[..=t], &mut ds[..=t]);
                for u in 0..=t {
                    let urow = (b * seq + u) * d_model + off;
                    let c = ds[u] * scale;
                    for i in 0..dh {
                        dq[row + i] += c * k[urow + i];
                        dk[urow + i] += c * q[row + i];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Forward FLOPs of [`attention_forward`] (scores, softmax, weighted sum).
pub fn attention_flops(batch: usize, seq: usize, heads: usize, d_model: usize) -> u64 {
    let dh = (d_model / heads) as u64;
    let pairs = (seq * (seq + 1) / 2) as u64;
    (batch * heads) as u64 * pairs * (4 * dh + 4)
}
