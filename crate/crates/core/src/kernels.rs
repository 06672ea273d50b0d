//! Row kernels shared by the graph evaluator and the eager decoder.
//!
//! Every kernel computes each output row from the matching input row only and
//! accumulates in a fixed index order, so evaluating a subset of rows gives
//! bit-identical results to evaluating the whole matrix.

use crate::scalar::Scalar;

/// `a (m×k) · b (k×n)`, accumulated over `k` in increasing order.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `x · w + bias` for a row-major `x (m×k)`.
pub fn linear<S: Scalar>(x: &[S], w: &[S], bias: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut y = matmul(x, w, m, k, n);
    add_row_bias(&mut y, bias);
    y
}

pub fn add_row_bias<S: Scalar>(y: &mut [S], bias: &[S]) {
    let n = bias.len();
    for row in y.chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

/// Dot product accumulated in index order (same order as [`matmul`]).
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes every row of length `gamma.len()` in place-free fashion.
pub fn layer_norm<S: Scalar>(x: &[S], gamma: &[S], beta: &[S]) -> Vec<S> {
    let n = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let (mean, inv) = row_moments(row);
        for ((&v, &g), &b) in row.iter().zip(gamma).zip(beta) {
            out.push((v - mean) * inv * g + b);
        }
    }
    out
}

/// Mean and inverse standard deviation of one row.
pub fn row_moments<S: Scalar>(row: &[S]) -> (S, S) {
    let n = S::of(row.len() as f64);
    let mut sum = S::zero();
    for &v in row {
        sum = sum + v;
    }
    let mean = sum / n;
    let mut var = S::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    (mean, (var + S::of(LAYER_NORM_EPS)).sqrt().recip())
}

#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    S::of(0.5) * x * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of the exact (erf-based) GELU.
#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    x.normal_cdf() + x * x.normal_pdf()
}

/// Softmax of `logits + mask` over each row of length `n`. Entries whose
/// masked logit is `-inf` get probability zero; a row with no finite entry
/// becomes all zeros.
pub fn masked_softmax<S: Scalar>(logits: &[S], mask: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); logits.len()];
    if n == 0 {
        return out;
    }
    for ((row, mrow), orow) in logits
        .chunks(n)
        .zip(mask.chunks(n))
        .zip(out.chunks_mut(n))
    {
        softmax_row(row, Some(mrow), orow);
    }
    out
}

pub fn softmax<S: Scalar>(logits: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); logits.len()];
    if n == 0 {
        return out;
    }
    for (row, orow) in logits.chunks(n).zip(out.chunks_mut(n)) {
        softmax_row(row, None, orow);
    }
    out
}

pub fn softmax_row<S: Scalar>(row: &[S], mask: Option<&[S]>, out: &mut [S]) {
    let masked = |i: usize| match mask {
        Some(m) => row[i] + m[i],
        None => row[i],
    };
    let mut max = S::neg_infinity();
    for i in 0..row.len() {
        let v = masked(i);
        if v > max {
            max = v;
        }
    }
    if max == S::neg_infinity() {
        out.iter_mut().for_each(|o| *o = S::zero());
        return;
    }
    let mut sum = S::zero();
    for (i, o) in out.iter_mut().enumerate() {
        let v = masked(i);
        let e = if v == S::neg_infinity() {
            S::zero()
        } else {
            (v - max).exp()
        };
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}
