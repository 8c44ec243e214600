//! Dense row-major kernels shared by the recorded (autodiff) and plain
//! forward paths. Keeping one implementation of each primitive is what makes
//! "train path and inference path agree" a checkable property instead of a
//! hope.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

/// C = A(m×k) · B(k×n), row-major. i-k-j loop order so the inner loop walks
/// both C and B contiguously.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// C(m×n) · Bᵀ where B is k×n; result m×k. Used for `dA = dC·Bᵀ` without
/// materialising the transpose.
pub(crate) fn matmul_nt<T: Scalar>(c: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&cv, &bv) in crow.iter().zip(brow) {
                acc = acc + cv * bv;
            }
            orow[p] = acc;
        }
    }
    out
}

/// Aᵀ · C where A is m×k and C is m×n; result k×n. Used for `dB = Aᵀ·dC`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], c: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (ov, &cv) in orow.iter_mut().zip(crow) {
                *ov = *ov + av * cv;
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Exact GELU: `0.5·x·(1 + erf(x/√2))`.
#[inline]
pub(crate) fn gelu_val<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// d/dx of the exact GELU: `Φ(x) + x·φ(x)`.
#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let phi_cdf = T::lit(0.5) * (T::one() + (x * T::lit(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::lit(0.398_942_280_401_432_7) * (-x * x * T::lit(0.5)).exp();
    phi_cdf + x * pdf
}

#[inline]
pub(crate) fn sigmoid_val<T: Scalar>(x: T) -> T {
    // Split on sign so the exponential never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax, max-subtracted for stability.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        let xr = &x[i * cols..(i + 1) * cols];
        let or = &mut out[i * cols..(i + 1) * cols];
        let m = xr.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
        let mut denom = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - m).exp();
            *o = e;
            denom = denom + e;
        }
        for o in or.iter_mut() {
            *o = *o / denom;
        }
    }
    out
}

/// Row-wise layer normalisation with per-column affine parameters.
/// Returns `(y, xhat, inv_std)`; the latter two feed the backward rule.
pub(crate) fn layernorm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    rows: usize,
    cols: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    debug_assert_eq!(gamma.len(), cols);
    debug_assert_eq!(beta.len(), cols);
    let cn = T::from_usize(cols).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for i in 0..rows {
        let xr = &x[i * cols..(i + 1) * cols];
        let mean = xr.iter().copied().sum::<T>() / cn;
        let var = xr
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / cn;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[i] = inv;
        for j in 0..cols {
            let h = (xr[j] - mean) * inv;
            xhat[i * cols + j] = h;
            y[i * cols + j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, inv_std)
}

/// Mean cross-entropy of row-major logits against integer labels.
/// Returns `(loss, probs)`; probs are the row-wise softmax, kept for the
/// backward rule.
pub(crate) fn cross_entropy<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    rows: usize,
    cols: usize,
) -> (T, Vec<T>) {
    debug_assert_eq!(labels.len(), rows);
    let probs = softmax_rows(logits, rows, cols);
    let mut loss = T::zero();
    for (i, &lab) in labels.iter().enumerate() {
        debug_assert!(lab < cols);
        // Comparison-based clamp: guards log(0) without laundering NaN from
        // diverged logits into a finite loss.
        let p = probs[i * cols + lab];
        let p = if p < T::min_positive_value() {
            T::min_positive_value()
        } else {
            p
        };
        loss = loss - p.ln();
    }
    (loss / T::from_usize(rows).unwrap(), probs)
}
