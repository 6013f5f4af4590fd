//! The frozen-set objective written once over any float type, so the
//! finite-difference oracle can run in double-double arithmetic.

use num_traits::Float;

use super::{warmup, HiddenSequence, LossWeights};
use crate::gate::{Matrix, KL_EPS};

fn c<T: Float>(x: f64) -> T {
    T::from(x).expect("representable")
}

fn softmax<T: Float>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&x| (x - max).exp()).collect();
    let s = e.iter().copied().fold(T::zero(), |a, b| a + b);
    e.into_iter().map(|x| x / s).collect()
}

fn dist<T: Float>(theta: &[T], cols: usize, h: &[f64]) -> Vec<T> {
    let mut z = vec![T::zero(); cols];
    for (i, &hi) in h.iter().enumerate() {
        let hi = c::<T>(hi);
        for j in 0..cols {
            z[j] = z[j] + hi * theta[i * cols + j];
        }
    }
    softmax(&z)
}

fn kl<T: Float>(p: &[T], q: &[T]) -> T {
    let eps = c::<T>(KL_EPS);
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > T::zero())
        .fold(T::zero(), |acc, (&a, &b)| acc + a * (a.ln() - b.max(eps).ln()))
}

fn sym<T: Float>(p: &[T], q: &[T]) -> T {
    c::<T>(0.5) * (kl(p, q) + kl(q, p))
}

fn entropy<T: Float>(p: &[T]) -> T {
    p.iter()
        .filter(|x| **x > T::zero())
        .fold(T::zero(), |acc, &x| acc - x * x.ln())
}

/// `[trust, reuse, smooth, lag, ws, total]` of the objective with routed
/// sets fixed to `sets`, for weights `theta` given row-major in `T`.
pub(crate) fn frozen_terms<T: Float>(
    theta: &[T],
    theta0: &Matrix,
    hs: &HiddenSequence,
    w: &LossWeights,
    train_step: u64,
    sets: &[Vec<usize>],
) -> [T; 6] {
    let cols = theta0.cols;
    let t_len = hs.len();
    let th0: Vec<T> = theta0.data.iter().map(|&x| c(x)).collect();
    let p: Vec<Vec<T>> = (0..t_len).map(|t| dist(theta, cols, hs.state(t))).collect();
    let q: Vec<Vec<T>> = (0..t_len).map(|t| dist(&th0, cols, hs.state(t))).collect();
    let pairs = c::<T>((t_len - 1) as f64);

    let mut trust = T::zero();
    for t in 0..t_len {
        trust = trust + kl(&p[t], &q[t]);
    }
    trust = trust / c((t_len) as f64);

    let mut rho = T::zero();
    for t in 1..t_len {
        let m = sets[t - 1].iter().fold(T::zero(), |a, &i| a + p[t][i]);
        rho = rho + m / c(w.top_k as f64);
    }
    rho = rho / pairs;
    let reuse = -(rho + c(w.eps)).ln();

    let mut smooth = T::zero();
    for t in 1..t_len {
        smooth = smooth + sym(&p[t], &p[t - 1]);
    }
    smooth = smooth / pairs;

    let mut lag = T::zero();
    for t in 1..t_len {
        let valid: Vec<usize> = w.lags.iter().copied().filter(|&d| d <= t).collect();
        let norm = if w.lag_normalize_valid { valid.len() } else { w.lags.len() };
        if norm == 0 {
            continue;
        }
        let inner = valid.iter().fold(T::zero(), |a, &d| a + sym(&p[t], &p[t - d]));
        lag = lag + inner / c(norm as f64);
    }
    lag = lag / pairs;

    let win = w.window;
    let n_full = t_len / win;
    let rest = t_len - n_full * win;
    let mut spans: Vec<(usize, usize, f64)> = (0..n_full).map(|b| (b * win, win, 1.0)).collect();
    if w.ws_include_partial && rest > 0 {
        spans.push((n_full * win, rest, rest as f64 / win as f64));
    }
    let mut ws = T::zero();
    let mut weight = T::zero();
    for &(start, len, wt) in &spans {
        let mut mean = vec![T::zero(); cols];
        for row in &p[start..start + len] {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m = *m + x;
            }
        }
        let mean: Vec<T> = mean.into_iter().map(|m| m / c(len as f64)).collect();
        ws = ws + c::<T>(wt) * entropy(&mean);
        weight = weight + c(wt);
    }
    if !spans.is_empty() {
        ws = ws / weight;
    }

    let a_r = c::<T>(warmup(train_step, w.warm_reuse_steps));
    let a_l = c::<T>(warmup(train_step, w.warm_loc_steps));
    let total = c::<T>(w.lambda_kl) * trust
        + a_r * c(w.lambda_reuse) * reuse
        + a_l * (c::<T>(w.lambda_smooth) * smooth + c::<T>(w.lambda_lag) * lag + c::<T>(w.lambda_ws) * ws);
    [trust, reuse, smooth, lag, ws, total]
}
