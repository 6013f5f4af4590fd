//! Toy router fine-tuning on synthetic hidden states.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{breakdown_from, forward, grad_from, HiddenSequence, LossBreakdown, LossWeights, ObjectiveError};
use crate::gate::Matrix;
use crate::metrics::overlap;

/// Piecewise-stationary hidden states: each sequence is a run of segments,
/// each with its own mean vector, and every state is its segment mean plus
/// isotropic Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiddenGenConfig {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub dim: usize,
    /// Steps between mean switches.
    pub switch_every: usize,
    pub mean_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for HiddenGenConfig {
    fn default() -> Self {
        Self {
            n_sequences: 8,
            seq_len: 64,
            dim: 8,
            switch_every: 32,
            mean_scale: 1.0,
            noise: 1.5,
            seed: 0,
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn piecewise_hiddens(cfg: &HiddenGenConfig) -> Result<Vec<HiddenSequence>, ObjectiveError> {
    if cfg.n_sequences == 0 || cfg.seq_len < 2 || cfg.dim == 0 || cfg.switch_every == 0 {
        return Err(ObjectiveError::BadConfig(
            "need at least one sequence of length >= 2, dim >= 1 and switch_every >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_sequences);
    for _ in 0..cfg.n_sequences {
        let mut states = Matrix::zeros(cfg.seq_len, cfg.dim);
        let mut mean = vec![0.0; cfg.dim];
        for t in 0..cfg.seq_len {
            if t % cfg.switch_every == 0 {
                mean.iter_mut().for_each(|m| *m = cfg.mean_scale * gaussian(&mut rng));
            }
            for (i, m) in mean.iter().enumerate() {
                *states.get_mut(t, i) = m + cfg.noise * gaussian(&mut rng);
            }
        }
        out.push(HiddenSequence::new(states)?);
    }
    Ok(out)
}

/// Gaussian gate weights with standard deviation `scale`.
pub fn init_gate(dim: usize, n_experts: usize, scale: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(dim, n_experts);
    m.data.iter_mut().for_each(|x| *x = scale * gaussian(&mut rng));
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seed of the initial gate weights.
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-2,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), ObjectiveError> {
        if self.steps == 0 {
            return Err(ObjectiveError::BadConfig("steps must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(ObjectiveError::BadConfig("lr must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(ObjectiveError::BadConfig("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub total: f64,
    pub trust_kl: f64,
    pub reuse_rho: f64,
    pub reuse: f64,
    pub smooth: f64,
    pub lag: f64,
    pub ws: f64,
    pub alpha_reuse: f64,
    pub alpha_loc: f64,
    pub eor: f64,
    pub grad_norm: f64,
}

impl TrainLogRow {
    fn new(step: usize, b: &LossBreakdown, eor: f64, grad_norm: f64) -> Self {
        Self {
            step,
            total: b.total,
            trust_kl: b.trust_kl,
            reuse_rho: b.reuse_rho,
            reuse: b.reuse_loss,
            smooth: b.smooth,
            lag: b.lag,
            ws: b.ws,
            alpha_reuse: b.alpha_reuse,
            alpha_loc: b.alpha_loc,
            eor,
            grad_norm,
        }
    }
}

fn sets_eor(sets: &[Vec<usize>], k: usize) -> f64 {
    let sum: f64 = sets.windows(2).map(|w| overlap(&w[0], &w[1]) as f64 / k as f64).sum();
    sum / (sets.len() - 1) as f64
}

/// Fine-tune `theta_init` with `theta0 := theta_init` frozen. One sequence
/// per step, round-robin. Training step `i` (from 1) drives the warmups.
pub fn train(
    theta_init: &Matrix,
    sequences: &[HiddenSequence],
    cfg: &TrainConfig,
    w: &LossWeights,
) -> Result<(Matrix, Vec<TrainLogRow>), ObjectiveError> {
    cfg.check()?;
    w.check()?;
    if sequences.is_empty() {
        return Err(ObjectiveError::BadConfig("at least one sequence is required".into()));
    }
    let theta0 = theta_init.clone();
    let mut theta = theta_init.clone();
    let mut m = vec![0.0; theta.data.len()];
    let mut v = vec![0.0; theta.data.len()];
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let hs = &sequences[(step - 1) % sequences.len()];
        let fwd = forward(&theta, &theta0, hs, w.top_k)?;
        let b = breakdown_from(&fwd, w, step as u64)?;
        if !b.total.is_finite() {
            return Err(ObjectiveError::Diverged { step });
        }
        let mut g = grad_from(&fwd, hs, w, step as u64)?;
        let norm = g.frobenius_norm();
        if !norm.is_finite() {
            return Err(ObjectiveError::Diverged { step });
        }
        if let Some(clip) = cfg.clip_norm {
            if norm > clip {
                let s = clip / norm;
                g.data.iter_mut().for_each(|x| *x *= s);
            }
        }
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (x, gi) in theta.data.iter_mut().zip(&g.data) {
                    *x -= cfg.lr * gi;
                }
            }
            Optimizer::Adam => {
                let c1 = 1.0 - cfg.beta1.powi(step as i32);
                let c2 = 1.0 - cfg.beta2.powi(step as i32);
                for i in 0..theta.data.len() {
                    let gi = g.data[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                    theta.data[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
                }
            }
        }
        log.push(TrainLogRow::new(step, &b, sets_eor(&fwd.sets, w.top_k), norm));
    }
    Ok((theta, log))
}

/// Loss terms and routing EOR averaged over sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub eor: f64,
    pub trust_kl: f64,
    pub reuse_rho: f64,
    pub reuse: f64,
    pub smooth: f64,
    pub lag: f64,
    pub ws: f64,
    pub total: f64,
}

pub fn evaluate(
    theta: &Matrix,
    theta0: &Matrix,
    sequences: &[HiddenSequence],
    w: &LossWeights,
    train_step: u64,
) -> Result<EvalSummary, ObjectiveError> {
    if sequences.is_empty() {
        return Err(ObjectiveError::BadConfig("at least one sequence is required".into()));
    }
    let mut acc = [0.0; 8];
    for hs in sequences {
        let fwd = forward(theta, theta0, hs, w.top_k)?;
        let b = breakdown_from(&fwd, w, train_step)?;
        let row = [
            sets_eor(&fwd.sets, w.top_k),
            b.trust_kl,
            b.reuse_rho,
            b.reuse_loss,
            b.smooth,
            b.lag,
            b.ws,
            b.total,
        ];
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
    let n = sequences.len() as f64;
    let [eor, trust_kl, reuse_rho, reuse, smooth, lag, ws, total] = acc.map(|x| x / n);
    Ok(EvalSummary {
        eor,
        trust_kl,
        reuse_rho,
        reuse,
        smooth,
        lag,
        ws,
        total,
    })
}

/// Data, gate, weights and optimizer settings of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: HiddenGenConfig,
    pub n_experts: usize,
    /// Standard deviation of the initial gate weights.
    pub init_scale: f64,
    pub weights: LossWeights,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: HiddenGenConfig::default(),
            n_experts: 16,
            init_scale: 0.5,
            // warmups shortened in proportion to the 500-step run
            weights: LossWeights {
                warm_reuse_steps: 100,
                warm_loc_steps: 200,
                ..LossWeights::default()
            },
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Experiment {
    #[serde(skip)]
    pub theta0: Matrix,
    #[serde(skip)]
    pub theta: Matrix,
    #[serde(skip)]
    pub log: Vec<TrainLogRow>,
    pub initial: EvalSummary,
    pub last: EvalSummary,
}

impl Experiment {
    /// Relative EOR change from the initial gate.
    pub fn eor_gain(&self) -> f64 {
        (self.last.eor - self.initial.eor) / self.initial.eor
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment, ObjectiveError> {
    if cfg.n_experts <= cfg.weights.top_k {
        return Err(ObjectiveError::BadConfig("n_experts must exceed top_k".into()));
    }
    let seqs = piecewise_hiddens(&cfg.data)?;
    let theta0 = init_gate(cfg.data.dim, cfg.n_experts, cfg.init_scale, cfg.train.seed);
    let (theta, log) = train(&theta0, &seqs, &cfg.train, &cfg.weights)?;
    let step = cfg.train.steps as u64;
    Ok(Experiment {
        initial: evaluate(&theta0, &theta0, &seqs, &cfg.weights, step)?,
        last: evaluate(&theta, &theta0, &seqs, &cfg.weights, step)?,
        theta0,
        theta,
        log,
    })
}

/// Values to sweep; unset axes keep the base configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambda_kl: Option<Vec<f64>>,
    pub lambda_reuse: Option<Vec<f64>>,
    pub lambda_smooth: Option<Vec<f64>>,
    pub lambda_lag: Option<Vec<f64>>,
    pub lambda_ws: Option<Vec<f64>>,
    pub lags: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub grid: SweepGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda_kl: f64,
    pub lambda_reuse: f64,
    pub lambda_smooth: f64,
    pub lambda_lag: f64,
    pub lambda_ws: f64,
    pub lags: String,
    pub initial_eor: f64,
    pub final_eor: f64,
    pub trust_kl: f64,
    pub reuse_rho: f64,
    pub reuse: f64,
    pub smooth: f64,
    pub lag: f64,
    pub ws: f64,
    pub total: f64,
}

impl SweepGrid {
    /// Cartesian product in field order, last axis fastest.
    pub fn points(&self, base: &LossWeights) -> Result<Vec<LossWeights>, ObjectiveError> {
        let axes: BTreeMap<usize, usize> = [
            self.lambda_kl.as_ref().map(Vec::len),
            self.lambda_reuse.as_ref().map(Vec::len),
            self.lambda_smooth.as_ref().map(Vec::len),
            self.lambda_lag.as_ref().map(Vec::len),
            self.lambda_ws.as_ref().map(Vec::len),
            self.lags.as_ref().map(Vec::len),
        ]
        .into_iter()
        .enumerate()
        .filter_map(|(i, n)| n.map(|n| (i, n)))
        .collect();
        if axes.is_empty() || axes.values().any(|&n| n == 0) {
            return Err(ObjectiveError::EmptyGrid);
        }
        let mut points = vec![base.clone()];
        for (&axis, &n) in &axes {
            let mut next = Vec::with_capacity(points.len() * n);
            for p in &points {
                for j in 0..n {
                    let mut q = p.clone();
                    match axis {
                        0 => q.lambda_kl = self.lambda_kl.as_ref().unwrap()[j],
                        1 => q.lambda_reuse = self.lambda_reuse.as_ref().unwrap()[j],
                        2 => q.lambda_smooth = self.lambda_smooth.as_ref().unwrap()[j],
                        3 => q.lambda_lag = self.lambda_lag.as_ref().unwrap()[j],
                        4 => q.lambda_ws = self.lambda_ws.as_ref().unwrap()[j],
                        _ => q.lags = self.lags.as_ref().unwrap()[j].clone(),
                    }
                    q.check()?;
                    next.push(q);
                }
            }
            points = next;
        }
        Ok(points)
    }
}

/// One training run per grid point, sharing data, initial gate and seed.
pub fn sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>, ObjectiveError> {
    let points = cfg.grid.points(&cfg.base.weights)?;
    points
        .into_par_iter()
        .map(|weights| {
            let run = run_experiment(&ExperimentConfig {
                weights: weights.clone(),
                ..cfg.base.clone()
            })?;
            let lags: Vec<String> = weights.lags.iter().map(usize::to_string).collect();
            Ok(SweepRow {
                lambda_kl: weights.lambda_kl,
                lambda_reuse: weights.lambda_reuse,
                lambda_smooth: weights.lambda_smooth,
                lambda_lag: weights.lambda_lag,
                lambda_ws: weights.lambda_ws,
                lags: lags.join(" "),
                initial_eor: run.initial.eor,
                final_eor: run.last.eor,
                trust_kl: run.last.trust_kl,
                reuse_rho: run.last.reuse_rho,
                reuse: run.last.reuse,
                smooth: run.last.smooth,
                lag: run.last.lag,
                ws: run.last.ws,
                total: run.last.total,
            })
        })
        .collect()
}
