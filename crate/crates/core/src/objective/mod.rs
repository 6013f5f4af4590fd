//! Locality-regularized router objective and its analytic gradient.
//!
//! Every loss term is a function of the per-step routing distributions
//! `P_t = softmax(h_t^T theta)`. Gradients are first taken with respect to
//! each `P_t` and then pulled back through the softmax. Gradients with
//! respect to a distribution are only defined up to a per-row constant (the
//! softmax Jacobian annihilates constants), so constant `+1` terms are
//! dropped throughout.

mod check;
mod precise;
mod train;

pub use check::{
    fd_gradient, fd_step_sweep, gradcheck, mc_campaign, mc_reuse_expectation, GradInstance,
    GradcheckReport, McCampaign, McEstimate, TERM_NAMES,
};
pub use train::{
    evaluate, init_gate, piecewise_hiddens, run_experiment, sweep, train, EvalSummary,
    Experiment, ExperimentConfig, HiddenGenConfig, Optimizer, SweepConfig, SweepGrid, SweepRow,
    TrainConfig, TrainLogRow,
};

use serde::{Deserialize, Serialize};

use crate::gate::{gate_forward, kl, topk, GateError, Matrix, KL_EPS};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ObjectiveError {
    #[error("sequence has {0} steps; at least 2 are required")]
    ShortSequence(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid weights: {0}")]
    BadWeights(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("non-finite loss at training step {step}")]
    Diverged { step: usize },
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("invalid distribution: {0}")]
    BadDistribution(String),
    #[error(transparent)]
    Gate(#[from] GateError),
}

/// A teacher-forced stream of hidden states, one row per step.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence {
    states: Matrix,
}

impl HiddenSequence {
    pub fn new(states: Matrix) -> Result<Self, ObjectiveError> {
        if states.data.iter().any(|x| !x.is_finite()) {
            return Err(ObjectiveError::Shape("hidden states must be finite".into()));
        }
        Ok(Self { states })
    }

    pub fn len(&self) -> usize {
        self.states.rows
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.states.cols
    }

    pub fn state(&self, t: usize) -> &[f64] {
        self.states.row(t)
    }

    pub fn states(&self) -> &Matrix {
        &self.states
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_reuse: f64,
    pub lambda_smooth: f64,
    pub lambda_lag: f64,
    pub lambda_ws: f64,
    pub lags: Vec<usize>,
    pub window: usize,
    pub warm_reuse_steps: u64,
    pub warm_loc_steps: u64,
    pub eps: f64,
    /// Routed experts per step.
    pub top_k: usize,
    /// Count the trailing partial window, weighted by its length over W.
    pub ws_include_partial: bool,
    /// Normalize each lag sum by the number of lags that fit instead of |D|.
    pub lag_normalize_valid: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kl: 0.45,
            lambda_reuse: 0.2,
            lambda_smooth: 0.05,
            lambda_lag: 0.05,
            lambda_ws: 0.01,
            lags: vec![1, 2, 4, 8, 16],
            window: 16,
            warm_reuse_steps: 400,
            warm_loc_steps: 800,
            eps: 1e-8,
            top_k: 2,
            ws_include_partial: false,
            lag_normalize_valid: false,
        }
    }
}

impl LossWeights {
    /// Every lambda set to zero; other settings at their defaults.
    pub fn zero() -> Self {
        Self {
            lambda_kl: 0.0,
            lambda_reuse: 0.0,
            lambda_smooth: 0.0,
            lambda_lag: 0.0,
            lambda_ws: 0.0,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<(), ObjectiveError> {
        let bad = |m: &str| Err(ObjectiveError::BadWeights(m.to_string()));
        let lambdas = [
            self.lambda_kl,
            self.lambda_reuse,
            self.lambda_smooth,
            self.lambda_lag,
            self.lambda_ws,
        ];
        if lambdas.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("weights must be finite and non-negative");
        }
        if self.lags.is_empty() {
            return bad("lag set must be non-empty");
        }
        if self.lags.contains(&0) || self.lags.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lags must be positive, distinct and ascending");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        Ok(())
    }

    pub fn alphas(&self, train_step: u64) -> (f64, f64) {
        (warmup(train_step, self.warm_reuse_steps), warmup(train_step, self.warm_loc_steps))
    }
}

/// `min(1, t / warm)`, with a zero warmup meaning fully on.
pub fn warmup(step: u64, warm: u64) -> f64 {
    if warm == 0 {
        1.0
    } else {
        (step as f64 / warm as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub trust_kl: f64,
    pub reuse_rho: f64,
    pub reuse_loss: f64,
    pub smooth: f64,
    pub lag: f64,
    pub ws: f64,
    pub total: f64,
    pub alpha_reuse: f64,
    pub alpha_loc: f64,
}

impl LossBreakdown {
    /// The weighted total recomputed from the stored terms.
    pub fn reassemble(&self, w: &LossWeights) -> f64 {
        combine(
            w,
            self.alpha_reuse,
            self.alpha_loc,
            [self.trust_kl, self.reuse_loss, self.smooth, self.lag, self.ws],
        )
    }
}

fn combine(w: &LossWeights, a_reuse: f64, a_loc: f64, t: [f64; 5]) -> f64 {
    w.lambda_kl * t[0]
        + a_reuse * w.lambda_reuse * t[1]
        + a_loc * (w.lambda_smooth * t[2] + w.lambda_lag * t[3] + w.lambda_ws * t[4])
}

fn check_dist(p: &[f64]) -> Result<(), ObjectiveError> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(ObjectiveError::BadDistribution("entries must be finite and non-negative".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(ObjectiveError::BadDistribution(format!("sums to {s}")));
    }
    Ok(())
}

/// `(1/K) * sum of P over prev_set`.
pub fn reuse_mass(p: &[f64], prev_set: &[usize], k: usize) -> Result<f64, ObjectiveError> {
    if prev_set.len() != k || k == 0 {
        return Err(ObjectiveError::Shape(format!(
            "previous set has {} entries, expected {k}",
            prev_set.len()
        )));
    }
    if let Some(&e) = prev_set.iter().find(|&&e| e >= p.len()) {
        return Err(ObjectiveError::Shape(format!("expert {e} out of range")));
    }
    Ok(prev_set.iter().map(|&i| p[i]).sum::<f64>() / k as f64)
}

/// `(rho, -ln(rho + eps))` where rho averages the reuse mass over steps 2..T.
pub fn reuse_loss(
    probs: &[Vec<f64>],
    sets: &[Vec<usize>],
    k: usize,
    eps: f64,
) -> Result<(f64, f64), ObjectiveError> {
    let t_len = probs.len();
    if t_len < 2 {
        return Err(ObjectiveError::ShortSequence(t_len));
    }
    if sets.len() < t_len - 1 {
        return Err(ObjectiveError::Shape("one routed set per step is required".into()));
    }
    let mut sum = 0.0;
    for t in 1..t_len {
        sum += reuse_mass(&probs[t], &sets[t - 1], k)?;
    }
    let rho = sum / (t_len - 1) as f64;
    Ok((rho, -(rho + eps).ln()))
}

pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64, ObjectiveError> {
    if p.len() != q.len() {
        return Err(ObjectiveError::Shape("distributions differ in length".into()));
    }
    Ok(kl(p, q))
}

/// `(1/T) sum_t KL(P_t || Pref_t)`.
pub fn trust_loss(probs: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64, ObjectiveError> {
    if probs.len() != reference.len() || probs.is_empty() {
        return Err(ObjectiveError::Shape("sequence lengths differ".into()));
    }
    let mut sum = 0.0;
    for (p, q) in probs.iter().zip(reference) {
        sum += kl_div(p, q)?;
    }
    Ok(sum / probs.len() as f64)
}

pub fn sym_kl(p: &[f64], q: &[f64]) -> f64 {
    0.5 * (kl(p, q) + kl(q, p))
}

/// Mean adjacent symmetric KL.
pub fn smooth_loss(probs: &[Vec<f64>]) -> Result<f64, ObjectiveError> {
    if probs.len() < 2 {
        return Err(ObjectiveError::ShortSequence(probs.len()));
    }
    let sum: f64 = probs.windows(2).map(|w| sym_kl(&w[1], &w[0])).sum();
    Ok(sum / (probs.len() - 1) as f64)
}

fn lag_norm(t: usize, lags: &[usize], normalize_valid: bool) -> f64 {
    if normalize_valid {
        lags.iter().filter(|&&d| d <= t).count() as f64
    } else {
        lags.len() as f64
    }
}

/// Symmetric KL against several lags, averaged over steps 2..T.
pub fn lag_loss(probs: &[Vec<f64>], lags: &[usize], normalize_valid: bool) -> Result<f64, ObjectiveError> {
    if lags.is_empty() {
        return Err(ObjectiveError::BadWeights("lag set must be non-empty".into()));
    }
    if probs.len() < 2 {
        return Err(ObjectiveError::ShortSequence(probs.len()));
    }
    let mut sum = 0.0;
    for t in 1..probs.len() {
        let mut inner = 0.0;
        for &d in lags.iter().filter(|&&d| d <= t) {
            inner += sym_kl(&probs[t], &probs[t - d]);
        }
        let norm = lag_norm(t, lags, normalize_valid);
        if norm > 0.0 {
            sum += inner / norm;
        }
    }
    Ok(sum / (probs.len() - 1) as f64)
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum()
}

/// Windows as `(start, len, weight)`.
fn windows(t_len: usize, w: usize, include_partial: bool) -> Vec<(usize, usize, f64)> {
    let n = t_len / w;
    let mut out: Vec<(usize, usize, f64)> = (0..n).map(|b| (b * w, w, 1.0)).collect();
    let rest = t_len - n * w;
    if include_partial && rest > 0 {
        out.push((n * w, rest, rest as f64 / w as f64));
    }
    out
}

fn window_mean(probs: &[Vec<f64>], start: usize, len: usize) -> Vec<f64> {
    let mut mean = vec![0.0; probs[start].len()];
    for p in &probs[start..start + len] {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= len as f64);
    mean
}

/// Mean entropy of window-averaged distributions. Zero when no window fits.
pub fn ws_loss(probs: &[Vec<f64>], window: usize, include_partial: bool) -> Result<f64, ObjectiveError> {
    if window == 0 {
        return Err(ObjectiveError::BadWeights("window must be at least 1".into()));
    }
    let wins = windows(probs.len(), window, include_partial);
    let total_weight: f64 = wins.iter().map(|w| w.2).sum();
    if wins.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = wins
        .iter()
        .map(|&(s, len, wt)| wt * entropy(&window_mean(probs, s, len)))
        .sum();
    Ok(sum / total_weight)
}

/// Distributions of the trainable and reference gates plus routed sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub probs: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    pub sets: Vec<Vec<usize>>,
}

pub fn forward(
    theta: &Matrix,
    theta0: &Matrix,
    hs: &HiddenSequence,
    k: usize,
) -> Result<Forward, ObjectiveError> {
    if theta.rows != theta0.rows || theta.cols != theta0.cols {
        return Err(ObjectiveError::Shape("theta and theta0 differ in shape".into()));
    }
    let mut probs = Vec::with_capacity(hs.len());
    let mut reference = Vec::with_capacity(hs.len());
    let mut sets = Vec::with_capacity(hs.len());
    for t in 0..hs.len() {
        let p = gate_forward(hs.state(t), theta)?;
        sets.push(topk(&p, k)?);
        probs.push(p);
        reference.push(gate_forward(hs.state(t), theta0)?);
    }
    Ok(Forward {
        probs,
        reference,
        sets,
    })
}

/// Loss terms on given distributions and routed sets.
pub fn breakdown_from(
    fwd: &Forward,
    w: &LossWeights,
    train_step: u64,
) -> Result<LossBreakdown, ObjectiveError> {
    w.check()?;
    let probs = &fwd.probs;
    let trust_kl = trust_loss(probs, &fwd.reference)?;
    let (reuse_rho, reuse_l) = reuse_loss(probs, &fwd.sets, w.top_k, w.eps)?;
    let smooth = smooth_loss(probs)?;
    let lag = lag_loss(probs, &w.lags, w.lag_normalize_valid)?;
    let ws = ws_loss(probs, w.window, w.ws_include_partial)?;
    let (alpha_reuse, alpha_loc) = w.alphas(train_step);
    Ok(LossBreakdown {
        trust_kl,
        reuse_rho,
        reuse_loss: reuse_l,
        smooth,
        lag,
        ws,
        total: combine(w, alpha_reuse, alpha_loc, [trust_kl, reuse_l, smooth, lag, ws]),
        alpha_reuse,
        alpha_loc,
    })
}

/// Full objective (without the language-model term). Routed sets are the
/// Top-K of the current distributions.
pub fn total_objective(
    theta: &Matrix,
    theta0: &Matrix,
    hs: &HiddenSequence,
    w: &LossWeights,
    train_step: u64,
) -> Result<LossBreakdown, ObjectiveError> {
    if hs.len() < 2 {
        return Err(ObjectiveError::ShortSequence(hs.len()));
    }
    breakdown_from(&forward(theta, theta0, hs, w.top_k)?, w, train_step)
}

/// Objective with the routed sets held fixed, which is the function the
/// analytic gradient differentiates.
pub fn frozen_objective(
    theta: &Matrix,
    theta0: &Matrix,
    hs: &HiddenSequence,
    w: &LossWeights,
    train_step: u64,
    sets: &[Vec<usize>],
) -> Result<LossBreakdown, ObjectiveError> {
    if hs.len() < 2 {
        return Err(ObjectiveError::ShortSequence(hs.len()));
    }
    let mut fwd = forward(theta, theta0, hs, w.top_k)?;
    fwd.sets = sets.to_vec();
    breakdown_from(&fwd, w, train_step)
}

type ProbGrads = Vec<Vec<f64>>;

/// Gradients of `KL(p || q)` with respect to `p` (up to a constant) and `q`.
fn kl_grads(p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64], scale: f64) {
    for k in 0..p.len() {
        if p[k] > 0.0 {
            gp[k] += scale * (p[k].ln() - q[k].max(KL_EPS).ln());
            if q[k] > KL_EPS {
                gq[k] -= scale * p[k] / q[k];
            }
        }
    }
}

fn sym_kl_grads(grads: &mut ProbGrads, probs: &[Vec<f64>], a: usize, b: usize, scale: f64) {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let (left, right) = grads.split_at_mut(hi);
    let (g_lo, g_hi) = (&mut left[lo], &mut right[0]);
    kl_grads(&probs[lo], &probs[hi], g_lo, g_hi, 0.5 * scale);
    kl_grads(&probs[hi], &probs[lo], g_hi, g_lo, 0.5 * scale);
}

/// Per-term gradients with respect to each step's distribution, in the
/// order trust, reuse, smooth, lag, ws.
pub fn prob_grads(fwd: &Forward, w: &LossWeights) -> Result<[ProbGrads; 5], ObjectiveError> {
    let probs = &fwd.probs;
    let t_len = probs.len();
    if t_len < 2 {
        return Err(ObjectiveError::ShortSequence(t_len));
    }
    let n = probs[0].len();
    let zeros = || vec![vec![0.0; n]; t_len];
    let pairs = (t_len - 1) as f64;

    let mut trust = zeros();
    let mut unused = vec![0.0; n];
    for t in 0..t_len {
        kl_grads(&probs[t], &fwd.reference[t], &mut trust[t], &mut unused, 1.0 / t_len as f64);
    }

    let mut reuse = zeros();
    let (rho, _) = reuse_loss(probs, &fwd.sets, w.top_k, w.eps)?;
    let coef = -1.0 / (rho + w.eps) / (pairs * w.top_k as f64);
    for (row, prev) in reuse.iter_mut().skip(1).zip(&fwd.sets) {
        for &i in prev {
            row[i] += coef;
        }
    }

    let mut smooth = zeros();
    for t in 1..t_len {
        sym_kl_grads(&mut smooth, probs, t, t - 1, 1.0 / pairs);
    }

    let mut lag = zeros();
    for t in 1..t_len {
        let norm = lag_norm(t, &w.lags, w.lag_normalize_valid);
        if norm == 0.0 {
            continue;
        }
        for &d in w.lags.iter().filter(|&&d| d <= t) {
            sym_kl_grads(&mut lag, probs, t, t - d, 1.0 / (pairs * norm));
        }
    }

    let mut ws = zeros();
    let wins = windows(t_len, w.window, w.ws_include_partial);
    let total_weight: f64 = wins.iter().map(|x| x.2).sum();
    for &(start, len, wt) in &wins {
        let mean = window_mean(probs, start, len);
        let scale = wt / (total_weight * len as f64);
        for g in &mut ws[start..start + len] {
            for (gk, &m) in g.iter_mut().zip(&mean) {
                if m > 0.0 {
                    *gk -= scale * m.ln();
                }
            }
        }
    }

    Ok([trust, reuse, smooth, lag, ws])
}

/// Pull distribution gradients back to the gate weights:
/// `dz = P * (g - <g, P>)`, `dtheta = sum_t h_t dz_t^T`.
pub fn backprop(probs: &[Vec<f64>], grads: &[Vec<f64>], hs: &HiddenSequence) -> Matrix {
    let n = probs[0].len();
    let mut out = Matrix::zeros(hs.dim(), n);
    let mut dz = vec![0.0; n];
    for t in 0..probs.len() {
        let p = &probs[t];
        let g = &grads[t];
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..n {
            dz[k] = p[k] * (g[k] - inner);
        }
        for (i, &h) in hs.state(t).iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let row = &mut out.data[i * n..(i + 1) * n];
            for (o, d) in row.iter_mut().zip(&dz) {
                *o += h * d;
            }
        }
    }
    out
}

/// Analytic per-term gradients with respect to theta, unweighted, in the
/// order trust, reuse, smooth, lag, ws.
pub fn term_gradients(fwd: &Forward, hs: &HiddenSequence, w: &LossWeights) -> Result<[Matrix; 5], ObjectiveError> {
    let g = prob_grads(fwd, w)?;
    Ok(g.map(|gt| backprop(&fwd.probs, &gt, hs)))
}

/// Gradient of the weighted objective given a forward pass.
pub fn grad_from(
    fwd: &Forward,
    hs: &HiddenSequence,
    w: &LossWeights,
    train_step: u64,
) -> Result<Matrix, ObjectiveError> {
    w.check()?;
    let (a_reuse, a_loc) = w.alphas(train_step);
    let coefs = [
        w.lambda_kl,
        a_reuse * w.lambda_reuse,
        a_loc * w.lambda_smooth,
        a_loc * w.lambda_lag,
        a_loc * w.lambda_ws,
    ];
    let terms = prob_grads(fwd, w)?;
    let n = fwd.probs[0].len();
    let mut combined = vec![vec![0.0; n]; fwd.probs.len()];
    for (c, term) in coefs.iter().zip(&terms) {
        if *c == 0.0 {
            continue;
        }
        for (row, g) in combined.iter_mut().zip(term) {
            for (x, y) in row.iter_mut().zip(g) {
                *x += c * y;
            }
        }
    }
    Ok(backprop(&fwd.probs, &combined, hs))
}

/// Gradient of [`total_objective`] with respect to theta, treating the
/// previous routed sets and the reference distributions as constants.
pub fn grad_total(
    theta: &Matrix,
    theta0: &Matrix,
    hs: &HiddenSequence,
    w: &LossWeights,
    train_step: u64,
) -> Result<Matrix, ObjectiveError> {
    if hs.len() < 2 {
        return Err(ObjectiveError::ShortSequence(hs.len()));
    }
    grad_from(&forward(theta, theta0, hs, w.top_k)?, hs, w, train_step)
}
