//! Numerical oracles: finite-difference gradients and the Monte Carlo
//! reuse-mass expectation.

use num_traits::Float;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use twofloat::TwoFloat;

use super::precise::frozen_terms;
use super::{forward, grad_from, reuse_mass, term_gradients, HiddenSequence, LossWeights, ObjectiveError};
use crate::gate::{random_distribution, Matrix};

pub const TERM_NAMES: [&str; 6] = ["trust", "reuse", "smooth", "lag", "ws", "total"];

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn fd_gradient<F>(theta: &Matrix, h: f64, mut f: F) -> Matrix
where
    F: FnMut(&Matrix) -> f64,
{
    let mut out = Matrix::zeros(theta.rows, theta.cols);
    let mut probe = theta.clone();
    for i in 0..theta.data.len() {
        let x = theta.data[i];
        probe.data[i] = x + h;
        let up = f(&probe);
        probe.data[i] = x - h;
        let down = f(&probe);
        probe.data[i] = x;
        out.data[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `max_i |a_i - b_i| / (|b_i| + 1e-8)`.
pub fn max_rel_error(analytic: &Matrix, fd: &Matrix) -> f64 {
    analytic
        .data
        .iter()
        .zip(&fd.data)
        .map(|(a, b)| (a - b).abs() / (b.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// A seeded random problem for gradient checking.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub theta: Matrix,
    pub theta0: Matrix,
    pub hidden: HiddenSequence,
    pub weights: LossWeights,
    pub train_step: u64,
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for x in &mut m.data {
        let z: f64 = rng.sample(StandardNormal);
        *x = scale * z;
    }
    m
}

impl GradInstance {
    /// `d <= 8`, `N_r <= 16`, `T <= 32`, random weights and lags.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..=8);
        let n = rng.random_range(3..=16);
        let t_len = rng.random_range(2..=32);
        let k = rng.random_range(1..=(n - 1).min(4));
        let mut lags: Vec<usize> = (1..=8).filter(|_| rng.random_bool(0.5)).collect();
        if lags.is_empty() {
            lags.push(1);
        }
        let weights = LossWeights {
            lambda_kl: rng.random_range(0.1..1.0),
            lambda_reuse: rng.random_range(0.1..1.0),
            lambda_smooth: rng.random_range(0.1..1.0),
            lambda_lag: rng.random_range(0.1..1.0),
            lambda_ws: rng.random_range(0.1..1.0),
            lags,
            window: rng.random_range(1..=t_len),
            warm_reuse_steps: 400,
            warm_loc_steps: 800,
            eps: 1e-8,
            top_k: k,
            ws_include_partial: rng.random_bool(0.5),
            lag_normalize_valid: rng.random_bool(0.5),
        };
        Self {
            theta: normal_matrix(&mut rng, d, n, 0.5),
            theta0: normal_matrix(&mut rng, d, n, 0.5),
            hidden: HiddenSequence::new(normal_matrix(&mut rng, t_len, d, 1.0)).expect("finite"),
            weights,
            train_step: rng.random_range(1..1000),
        }
    }

    /// Central differences of every term and the total at once, with the
    /// objective evaluated in type `T`.
    fn fd_terms<T: Float>(&self, h: f64, sets: &[Vec<usize>]) -> Vec<Matrix> {
        let cast = |x: f64| T::from(x).expect("representable");
        let base: Vec<T> = self.theta.data.iter().map(|&x| cast(x)).collect();
        let step = cast(h);
        let mut probe = base.clone();
        let mut out = vec![Matrix::zeros(self.theta.rows, self.theta.cols); 6];
        let eval = |th: &[T]| {
            frozen_terms(th, &self.theta0, &self.hidden, &self.weights, self.train_step, sets)
        };
        for i in 0..base.len() {
            probe[i] = base[i] + step;
            let up = eval(&probe);
            probe[i] = base[i] - step;
            let down = eval(&probe);
            probe[i] = base[i];
            for (m, (u, d)) in out.iter_mut().zip(up.iter().zip(&down)) {
                m.data[i] = ((*u - *d) / (step + step)).to_f64().expect("finite");
            }
        }
        out
    }

    /// Analytic gradients paired with central differences for each term and
    /// the total, ordered as [`TERM_NAMES`]. With `extended` the differenced
    /// objective is evaluated in double-double arithmetic, which removes the
    /// f64 round-off floor of the differences; otherwise in f64.
    pub fn gradients(&self, h: f64, extended: bool) -> Result<Vec<(Matrix, Matrix)>, ObjectiveError> {
        let fwd = forward(&self.theta, &self.theta0, &self.hidden, self.weights.top_k)?;
        let mut analytic: Vec<Matrix> = term_gradients(&fwd, &self.hidden, &self.weights)?.into();
        analytic.push(grad_from(&fwd, &self.hidden, &self.weights, self.train_step)?);
        let fd = if extended {
            self.fd_terms::<TwoFloat>(h, &fwd.sets)
        } else {
            self.fd_terms::<f64>(h, &fwd.sets)
        };
        Ok(analytic.into_iter().zip(fd).collect())
    }

    /// Terms of the frozen-set objective from the generic evaluator, in f64.
    pub fn oracle_terms(&self) -> Result<[f64; 6], ObjectiveError> {
        let fwd = forward(&self.theta, &self.theta0, &self.hidden, self.weights.top_k)?;
        Ok(frozen_terms(&self.theta.data, &self.theta0, &self.hidden, &self.weights, self.train_step, &fwd.sets))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub step: f64,
    /// Worst relative error per term, ordered as [`TERM_NAMES`].
    pub max_rel_error: [f64; 6],
    pub worst: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst < tol
    }
}

/// Compare analytic and central-difference gradients on `instances` seeded
/// problems, differencing in double-double arithmetic.
pub fn gradcheck(instances: usize, seed: u64, h: f64) -> Result<GradcheckReport, ObjectiveError> {
    let per: Vec<[f64; 6]> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let inst = GradInstance::random(seed.wrapping_add(i as u64));
            let mut errs = [0.0; 6];
            for (slot, (a, fd)) in errs.iter_mut().zip(inst.gradients(h, true)?) {
                *slot = max_rel_error(&a, &fd);
            }
            Ok(errs)
        })
        .collect::<Result<_, ObjectiveError>>()?;
    let mut max_rel_error = [0.0f64; 6];
    for errs in &per {
        for (m, e) in max_rel_error.iter_mut().zip(errs) {
            *m = m.max(*e);
        }
    }
    Ok(GradcheckReport {
        instances,
        step: h,
        worst: max_rel_error.iter().copied().fold(0.0, f64::max),
        max_rel_error,
    })
}

/// Worst absolute error of the total-objective gradient for each step size.
pub fn fd_step_sweep(inst: &GradInstance, steps: &[f64], extended: bool) -> Result<Vec<(f64, f64)>, ObjectiveError> {
    steps
        .iter()
        .map(|&h| {
            let grads = inst.gradients(h, extended)?;
            let (a, fd) = &grads[5];
            let err = a.data.iter().zip(&fd.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            Ok((h, err))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    /// Mean number of the K draws that land in the previous set.
    pub estimate: f64,
    /// `K^2 m`.
    pub expected: f64,
    pub abs_error: f64,
    pub std_error: f64,
    pub z: f64,
}

impl McEstimate {
    pub fn within(&self, sigmas: f64) -> bool {
        if self.std_error == 0.0 {
            self.abs_error == 0.0
        } else {
            self.abs_error < sigmas * self.std_error
        }
    }
}

/// Draw K i.i.d. experts from `p` per sample and count how many fall in
/// `prev_set`; compare the mean count with `K^2 m`.
pub fn mc_reuse_expectation(
    p: &[f64],
    prev_set: &[usize],
    k: usize,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate, ObjectiveError> {
    super::check_dist(p)?;
    if n_samples == 0 {
        return Err(ObjectiveError::BadConfig("n_samples must be at least 1".into()));
    }
    let m = reuse_mass(p, prev_set, k)?;
    let mut member = vec![false; p.len()];
    for &e in prev_set {
        member[e] = true;
    }
    let dist = WeightedIndex::new(p).map_err(|e| ObjectiveError::BadDistribution(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    for _ in 0..n_samples * k {
        if member[dist.sample(&mut rng)] {
            hits += 1;
        }
    }
    let estimate = hits as f64 / n_samples as f64;
    let expected = (k * k) as f64 * m;
    let q: f64 = prev_set.iter().map(|&i| p[i]).sum::<f64>().clamp(0.0, 1.0);
    let std_error = (k as f64 * q * (1.0 - q) / n_samples as f64).sqrt();
    let abs_error = (estimate - expected).abs();
    Ok(McEstimate {
        estimate,
        expected,
        abs_error,
        std_error,
        z: if std_error > 0.0 { abs_error / std_error } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McCampaign {
    pub instances: usize,
    pub passed: usize,
    pub max_z: f64,
}

impl McCampaign {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.instances as f64
    }
}

/// Random instances, each passing when the estimate is within 4 standard
/// errors of `K^2 m`.
pub fn mc_campaign(instances: usize, n_samples: usize, seed: u64) -> Result<McCampaign, ObjectiveError> {
    let results: Vec<McEstimate> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let n = rng.random_range(2..=32);
            let k = rng.random_range(1..n.min(8));
            let sharp = rng.random_range(0.2..3.0);
            let p = random_distribution(&mut rng, n, sharp);
            let mut ids: Vec<usize> = (0..n).collect();
            for j in 0..k {
                let swap = rng.random_range(j..n);
                ids.swap(j, swap);
            }
            mc_reuse_expectation(&p, &ids[..k], k, n_samples, rng.random())
        })
        .collect::<Result<_, _>>()?;
    Ok(McCampaign {
        instances,
        passed: results.iter().filter(|r| r.within(4.0)).count(),
        max_z: results.iter().map(|r| r.z).fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_is_exact_on_quadratics() {
        let theta = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let fd = fd_gradient(&theta, 1e-3, |m| m.data.iter().map(|x| x * x).sum());
        for (g, x) in fd.data.iter().zip(&theta.data) {
            assert!((g - 2.0 * x).abs() < 1e-9);
        }
    }

    #[test]
    fn mc_examples() {
        let r = mc_reuse_expectation(&[0.0, 1.0, 0.0, 0.0], &[1, 2, 3], 3, 100, 1).unwrap();
        assert_eq!(r.estimate, 3.0);
        assert_eq!(r.expected, 3.0);
        assert!(r.within(4.0));

        let r = mc_reuse_expectation(&[0.25; 4], &[0, 1], 2, 100_000, 2).unwrap();
        assert_eq!(r.expected, 1.0);
        assert!(r.within(4.0), "{r:?}");
        assert!(mc_reuse_expectation(&[0.5, 0.6], &[0], 1, 10, 0).is_err());
    }

    #[test]
    fn small_gradcheck() {
        let r = gradcheck(4, 11, 1e-5).unwrap();
        assert!(r.passes(1e-5), "{r:?}");
    }
}
