//! Slice-level kernels shared by the tape and the free-standing ops.

use std::ops::Range;

use super::tensor::Scalar;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// A transposed operand is stored row-major in its untransposed shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    c: &mut [T],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let a_strides = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let b_strides = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    T::gemm(m, k, n, a, a_strides, b, b_strides, c, accumulate);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inner = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let dinner = c * (T::one() + T::from_f64(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Per-row standardisation over `d` columns. Returns `(xhat, rstd)`.
pub(crate) fn normalize_rows<T: Scalar>(x: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let dn = T::from_f64(d as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / d.max(1));
    for row in x.chunks(d) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
    }
    (xhat, rstd)
}

/// Accumulates dL/dx for `y = xhat·gain + bias` into `gx`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    gy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    gx: &mut [T],
) {
    let dn = T::from_f64(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (((grow, hrow), &r), gxrow) in gy
        .chunks(d)
        .zip(xhat.chunks(d))
        .zip(rstd)
        .zip(gx.chunks_mut(d))
    {
        for ((dh, &g), &gi) in dxhat.iter_mut().zip(grow).zip(gain) {
            *dh = g * gi;
        }
        let mean_dh = dxhat.iter().copied().sum::<T>() / dn;
        let mean_dh_h = dxhat
            .iter()
            .zip(hrow)
            .map(|(&a, &b)| a * b)
            .sum::<T>()
            / dn;
        for ((out, &dh), &h) in gxrow.iter_mut().zip(&dxhat).zip(hrow) {
            *out = *out + r * (dh - mean_dh - h * mean_dh_h);
        }
    }
}

/// `log Σ exp(row)`, shifted by the row maximum.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Numerically stable softmax in place.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s = s + *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

/// Forward multi-head attention over independent row segments. Returns the
/// output and the attention probabilities, laid out segment by segment, head by
/// head, as `len × len` blocks.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    segments: &[Range<usize>],
    key_mask: &[bool],
) -> (Vec<T>, Vec<T>) {
    let dk = d / heads;
    let scale = T::one() / T::from_f64(dk as f64).sqrt();
    let mut out = vec![T::zero(); q.len()];
    let total: usize = segments.iter().map(|s| s.len() * s.len() * heads).sum();
    let mut probs = vec![T::zero(); total];
    let mut off = 0;
    for seg in segments {
        let n = seg.len();
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let block = &mut probs[off..off + n * n];
            for (bi, i) in seg.clone().enumerate() {
                let qi = &q[i * d + cols.start..i * d + cols.end];
                let prow = &mut block[bi * n..(bi + 1) * n];
                let mut any = false;
                for (bj, j) in seg.clone().enumerate() {
                    if key_mask[j] {
                        let kj = &k[j * d + cols.start..j * d + cols.end];
                        prow[bj] = dot(qi, kj) * scale;
                        any = true;
                    } else {
                        prow[bj] = T::neg_infinity();
                    }
                }
                if !any {
                    prow.iter_mut().for_each(|p| *p = T::zero());
                    continue;
                }
                softmax_in_place(prow);
                let orow = &mut out[i * d + cols.start..i * d + cols.end];
                for (bj, j) in seg.clone().enumerate() {
                    let p = prow[bj];
                    if p != T::zero() {
                        let vj = &v[j * d + cols.start..j * d + cols.end];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o = *o + p * x;
                        }
                    }
                }
            }
            off += n * n;
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d: usize,
    heads: usize,
    segments: &[Range<usize>],
    dq: &mut [T],
    dk_out: &mut [T],
    dv: &mut [T],
) {
    let dk = d / heads;
    let scale = T::one() / T::from_f64(dk as f64).sqrt();
    let mut off = 0;
    let mut dp = Vec::new();
    for seg in segments {
        let n = seg.len();
        dp.resize(n, T::zero());
        for h in 0..heads {
            let c0 = h * dk;
            let block = &probs[off..off + n * n];
            for (bi, i) in seg.clone().enumerate() {
                let prow = &block[bi * n..(bi + 1) * n];
                let gi = &g[i * d + c0..i * d + c0 + dk];
                // dP_ij = gᵢ · vⱼ ; dV_j += p_ij gᵢ
                for (bj, j) in seg.clone().enumerate() {
                    let vj = &v[j * d + c0..j * d + c0 + dk];
                    dp[bj] = dot(gi, vj);
                    let p = prow[bj];
                    if p != T::zero() {
                        for (x, &y) in dv[j * d + c0..j * d + c0 + dk].iter_mut().zip(gi) {
                            *x = *x + p * y;
                        }
                    }
                }
                let inner: T = prow.iter().zip(&dp).map(|(&p, &x)| p * x).sum();
                let qi: Vec<T> = q[i * d + c0..i * d + c0 + dk].to_vec();
                for (bj, j) in seg.clone().enumerate() {
                    let ds = prow[bj] * (dp[bj] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..dk {
                        dq[i * d + c0 + c] = dq[i * d + c0 + c] + ds * k[j * d + c0 + c];
                        dk_out[j * d + c0 + c] = dk_out[j * d + c0 + c] + ds * qi[c];
                    }
                }
            }
            off += n * n;
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
