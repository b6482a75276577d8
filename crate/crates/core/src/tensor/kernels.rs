//! Slice-level kernels shared by graph evaluation and plain inference code.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(arow, brow);
        }
    }
    c
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<S: Real>(c: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [S::zero(); 4];
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

pub fn transpose<S: Real>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut t = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

pub fn softmax_rows<S: Real>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = S::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub fn log_softmax_rows<S: Real>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Row-wise layer normalization; returns the output and per-row `(mean, rstd)`.
pub fn layer_norm<S: Real>(x: &[S], gamma: &[S], beta: &[S], eps: S) -> (Vec<S>, Vec<(S, S)>) {
    let cols = gamma.len();
    let n = S::of(cols as f64);
    let mut out = vec![S::zero(); x.len()];
    let mut stats = Vec::with_capacity(x.len() / cols.max(1));
    for (xr, yr) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = xr.iter().copied().sum::<S>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let rstd = S::one() / (var + eps).sqrt();
        for j in 0..cols {
            yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

/// Rotation table for 2-D rotary embeddings: `(cos, sin)` per token and
/// rotary pair, laid out `[token][pair]` with `head_dim / 2` pairs.
///
/// The first half of the pairs rotate by `row · θ_k`, the second half by
/// `col · θ_k`, with `θ_k = base^(-2k / (head_dim / 2))`.
pub fn rope_table<S: Real>(positions: &[(u32, u32)], head_dim: usize, base: f64) -> (Vec<S>, Vec<S>) {
    let pairs = head_dim / 2;
    let quarter = head_dim / 4;
    let half = (head_dim / 2) as f64;
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for &(row, col) in positions {
        for j in 0..pairs {
            let (k, p) = if j < quarter { (j, row) } else { (j - quarter, col) };
            let theta = libm::pow(base, -2.0 * k as f64 / half);
            let angle = p as f64 * theta;
            cos.push(S::of(libm::cos(angle)));
            sin.push(S::of(libm::sin(angle)));
        }
    }
    (cos, sin)
}

/// Applies the rotation in place to `x[tokens × heads·head_dim]`.
/// `inverse` rotates by the negated angles (the adjoint).
pub fn rope_apply<S: Real>(x: &mut [S], cos: &[S], sin: &[S], heads: usize, head_dim: usize, inverse: bool) {
    let pairs = head_dim / 2;
    let row_width = heads * head_dim;
    if row_width == 0 {
        return;
    }
    for (t, row) in x.chunks_mut(row_width).enumerate() {
        let c = &cos[t * pairs..(t + 1) * pairs];
        let s = &sin[t * pairs..(t + 1) * pairs];
        for head in row.chunks_mut(head_dim) {
            for j in 0..pairs {
                let (x0, x1) = (head[2 * j], head[2 * j + 1]);
                let sj = if inverse { -s[j] } else { s[j] };
                head[2 * j] = x0 * c[j] - x1 * sj;
                head[2 * j + 1] = x0 * sj + x1 * c[j];
            }
        }
    }
}
