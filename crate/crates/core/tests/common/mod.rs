//! Test-side oracles shared by the integration suites. Nothing here calls
//! the library routine it is checked against.

#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sae_ensemble::sae::{Activation, SaeParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// SAE with randomized biases (and thresholds) so every parameter block matters.
pub fn random_sae(rng: &mut impl Rng, d: usize, k: usize, activation: Activation, lambda: f64) -> SaeParams {
    let mut p = SaeParams::init(d, k, activation, lambda, None, rng.random()).unwrap();
    p.w_enc = gaussian(rng, k, d, 0.8);
    p.b_enc = gaussian(rng, 1, k, 0.3).row(0).to_owned();
    p.b_dec = gaussian(rng, 1, d, 0.5).row(0).to_owned();
    if let Some(t) = p.theta.as_mut() {
        t.mapv_inplace(|_| rng.random_range(0.05..0.3));
    }
    p
}

// ---------------------------------------------------------------------------
// Forward pass and loss, written out element by element
// ---------------------------------------------------------------------------

pub fn oracle_codes(p: &SaeParams, a: ArrayView1<'_, f64>) -> Vec<f64> {
    let k = p.w_enc.nrows();
    let d = a.len();
    let pre: Vec<f64> = (0..k).map(|j| (0..d).map(|q| p.w_enc[[j, q]] * a[q]).sum::<f64>() + p.b_enc[j]).collect();
    match p.activation {
        Activation::Relu => pre.iter().map(|v| v.max(0.0)).collect(),
        Activation::Topk { k: kk } => {
            let relu: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let mut idx: Vec<usize> = (0..k).collect();
            // stable sort keeps lower index first among equal values
            idx.sort_by(|&x, &y| pre[y].partial_cmp(&pre[x]).unwrap());
            let mut out = vec![0.0; k];
            for &j in idx.iter().take(kk) {
                out[j] = relu[j];
            }
            out
        }
        Activation::Jumprelu { .. } => {
            let theta = p.theta.as_ref().unwrap();
            pre.iter().zip(theta).map(|(&z, &t)| if z > t { z } else { 0.0 }).collect()
        }
    }
}

pub fn oracle_decode(w_dec: &Array2<f64>, b_dec: &Array1<f64>, c: &[f64]) -> Vec<f64> {
    (0..w_dec.nrows()).map(|q| (0..c.len()).map(|j| w_dec[[q, j]] * c[j]).sum::<f64>() + b_dec[q]).collect()
}

pub fn oracle_loss(p: &SaeParams, x: ArrayView2<'_, f64>, lambda: f64) -> f64 {
    let mut total = 0.0;
    for a in x.rows() {
        let c = oracle_codes(p, a);
        let r = oracle_decode(&p.w_dec, &p.b_dec, &c);
        let err: f64 = r.iter().zip(a.iter()).map(|(u, v)| (u - v).powi(2)).sum();
        let pen: f64 = if p.activation.p_norm() == 0 {
            c.iter().filter(|v| **v != 0.0).count() as f64
        } else {
            c.iter().map(|v| v.abs()).sum()
        };
        total += err + lambda * pen;
    }
    total / x.nrows() as f64
}

/// Distance of the instance from the nearest non-differentiable point: the
/// smallest |pre-activation| and, for TopK, the gap between the K-th and
/// (K+1)-th largest pre-activations.
pub fn kink_distance(p: &SaeParams, x: ArrayView2<'_, f64>) -> f64 {
    let mut best = f64::INFINITY;
    for a in x.rows() {
        let pre: Vec<f64> = (0..p.w_enc.nrows()).map(|j| p.w_enc.row(j).dot(&a) + p.b_enc[j]).collect();
        for v in &pre {
            best = best.min(v.abs());
        }
        if let Activation::Topk { k } = p.activation {
            let mut s = pre.clone();
            s.sort_by(|u, v| v.partial_cmp(u).unwrap());
            if k < s.len() {
                best = best.min(s[k - 1] - s[k]);
            }
        }
    }
    best
}

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Max relative error between the analytic gradients and central finite
/// differences of [`oracle_loss`]. Decoder entries are perturbed and then
/// their column is renormalized, so the reference is the derivative along
/// the constraint surface.
pub fn max_gradient_error(p: &SaeParams, x: ArrayView2<'_, f64>, lambda: f64, h: f64) -> f64 {
    let (_, g) = p.loss_gradients_with_lambda(x, lambda).unwrap();
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, plus: &SaeParams, minus: &SaeParams| {
        let num = (oracle_loss(plus, x, lambda) - oracle_loss(minus, x, lambda)) / (2.0 * h);
        worst = worst.max(rel_err(analytic, num));
    };
    for idx in ndarray::indices(p.w_enc.raw_dim()) {
        let (mut a, mut b) = (p.clone(), p.clone());
        a.w_enc[idx] += h;
        b.w_enc[idx] -= h;
        check(g.w_enc[idx], &a, &b);
    }
    for j in 0..p.b_enc.len() {
        let (mut a, mut b) = (p.clone(), p.clone());
        a.b_enc[j] += h;
        b.b_enc[j] -= h;
        check(g.b_enc[j], &a, &b);
    }
    for q in 0..p.b_dec.len() {
        let (mut a, mut b) = (p.clone(), p.clone());
        a.b_dec[q] += h;
        b.b_dec[q] -= h;
        check(g.b_dec[q], &a, &b);
    }
    for (q, j) in ndarray::indices(p.w_dec.raw_dim()) {
        let (mut a, mut b) = (p.clone(), p.clone());
        a.w_dec[[q, j]] += h;
        b.w_dec[[q, j]] -= h;
        for m in [&mut a, &mut b] {
            let n = m.w_dec.column(j).dot(&m.w_dec.column(j)).sqrt();
            m.w_dec.column_mut(j).mapv_inplace(|v| v / n);
        }
        check(g.w_dec[[q, j]], &a, &b);
    }
    worst
}

// ---------------------------------------------------------------------------
// Metrics by brute force
// ---------------------------------------------------------------------------

pub fn oracle_mse(a: ArrayView2<'_, f64>, r: ArrayView2<'_, f64>) -> f64 {
    let mut s = 0.0;
    for n in 0..a.nrows() {
        for q in 0..a.ncols() {
            s += (a[[n, q]] - r[[n, q]]).powi(2);
        }
    }
    s / a.nrows() as f64
}

pub fn oracle_ev(a: ArrayView2<'_, f64>, r: ArrayView2<'_, f64>) -> f64 {
    let (n, d) = a.dim();
    let mut total = 0.0;
    for q in 0..d {
        let mean = (0..n).map(|i| a[[i, q]]).sum::<f64>() / n as f64;
        let sse: f64 = (0..n).map(|i| (a[[i, q]] - r[[i, q]]).powi(2)).sum();
        let sst: f64 = (0..n).map(|i| (a[[i, q]] - mean).powi(2)).sum();
        total += 1.0 - sse / sst;
    }
    total / d as f64
}

pub fn oracle_rel_sparsity(c: ArrayView2<'_, f64>) -> f64 {
    let (n, m) = c.dim();
    let nnz = c.iter().filter(|v| v.abs() > 1e-12).count();
    nnz as f64 / n as f64 / m as f64
}

fn cosine(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for i in 0..u.len() {
        uv += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    uv / (uu.sqrt() * vv.sqrt())
}

pub fn oracle_diversity(f: ArrayView2<'_, f64>, tau: f64) -> usize {
    let m = f.ncols();
    (0..m)
        .filter(|&i| (0..m).filter(|&j| j != i).all(|j| cosine(f.column(i), f.column(j)).abs().min(1.0) <= tau))
        .count()
}

/// Number of feature pairs `(i, j)`, ordered, that are both nonzero in some sample.
pub fn oracle_gram_nnz(c: ArrayView2<'_, f64>) -> usize {
    let (n, m) = c.dim();
    let mut count = 0;
    for i in 0..m {
        for j in 0..m {
            if (0..n).any(|s| c[[s, i]].abs() > 1e-12 && c[[s, j]].abs() > 1e-12) {
                count += 1;
            }
        }
    }
    count
}

pub fn oracle_connectivity(c: ArrayView2<'_, f64>) -> f64 {
    let m = c.ncols() as f64;
    1.0 - oracle_gram_nnz(c) as f64 / (m * m)
}

pub fn oracle_stability(runs: &[Array2<f64>], s: usize) -> f64 {
    let base = &runs[s];
    let mut total = 0.0;
    for i in 0..base.ncols() {
        let mut best = f64::NEG_INFINITY;
        for (t, other) in runs.iter().enumerate() {
            if t == s {
                continue;
            }
            for j in 0..other.ncols() {
                best = best.max(cosine(base.column(i), other.column(j)));
            }
        }
        total += best;
    }
    total / base.ncols() as f64
}

/// Unit-norm random columns; the last `dupes` columns copy earlier ones
/// (possibly negated) so that cosines of exactly +-1 occur.
pub fn random_features(rng: &mut impl Rng, d: usize, m: usize, dupes: usize) -> Array2<f64> {
    let mut f = gaussian(rng, d, m, 1.0);
    for j in m - dupes..m {
        let src = rng.random_range(0..m - dupes);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let col = f.column(src).to_owned() * sign;
        f.column_mut(j).assign(&col);
    }
    for mut col in f.columns_mut() {
        let n = col.dot(&col).sqrt();
        col /= n;
    }
    f
}

/// Non-negative coefficients with roughly `density` of entries nonzero.
pub fn random_sparse_codes(rng: &mut impl Rng, n: usize, m: usize, density: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, m), || if rng.random_bool(density) { rng.random_range(0.01..2.0) } else { 0.0 })
}

/// `|a - b| / max(|a|, |b|)` with exact zero when equal.
pub fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Exact two-sided 99% acceptance band for the number of successes of
/// Binomial(n, 1/2), as a fraction of `n`.
pub fn binomial_null_band(n: usize) -> (f64, f64) {
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0;
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        acc += (ln_choose + ln_half_n).exp();
        cdf.push(acc);
    }
    let lo = (0..=n).find(|&k| cdf[k] > 0.005).unwrap();
    let hi = (0..=n).find(|&k| cdf[k] >= 0.995).unwrap();
    (lo as f64 / n as f64, hi as f64 / n as f64)
}

/// Mean over ground-truth columns of the best cosine with any learned column.
pub fn mean_max_cosine(truth: ArrayView2<'_, f64>, learned: ArrayView2<'_, f64>) -> f64 {
    let mut total = 0.0;
    for t in truth.columns() {
        let best = learned.columns().into_iter().map(|l| cosine(t, l)).fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    total / truth.ncols() as f64
}
