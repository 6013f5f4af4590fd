//! Softmax gate, deterministic Top-K, and the probability-margin / Pinsker
//! checks that relate distribution drift to routing stability.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Floor applied to the second argument of KL divergences.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GateError {
    #[error("non-finite logit at expert {0}")]
    NonFiniteLogit(usize),
    #[error("k = {k} is out of range for {n} experts")]
    BadK { k: usize, n: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Trainable gate weights `theta` (d x N_r) and the frozen snapshot `theta0`
/// that defines the reference routing distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub theta: Matrix,
    theta0: Matrix,
}

impl GateParams {
    /// Snapshot `theta` as the frozen reference.
    pub fn snapshot(theta: Matrix) -> Self {
        Self {
            theta0: theta.clone(),
            theta,
        }
    }

    pub fn with_reference(theta: Matrix, theta0: Matrix) -> Result<Self, GateError> {
        if theta.rows != theta0.rows || theta.cols != theta0.cols {
            return Err(GateError::Shape("theta and theta0 differ in shape".into()));
        }
        Ok(Self { theta, theta0 })
    }

    pub fn theta0(&self) -> &Matrix {
        &self.theta0
    }

    pub fn hidden_dim(&self) -> usize {
        self.theta.rows
    }

    pub fn n_experts(&self) -> usize {
        self.theta.cols
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Router logits `h^T theta`.
pub fn gate_logits(h: &[f64], theta: &Matrix) -> Result<Vec<f64>, GateError> {
    if h.len() != theta.rows {
        return Err(GateError::Shape(format!(
            "hidden has {} entries, gate expects {}",
            h.len(),
            theta.rows
        )));
    }
    let mut z = vec![0.0; theta.cols];
    for (i, &hi) in h.iter().enumerate() {
        for (zj, &w) in z.iter_mut().zip(theta.row(i)) {
            *zj += hi * w;
        }
    }
    if let Some(j) = z.iter().position(|x| !x.is_finite()) {
        return Err(GateError::NonFiniteLogit(j));
    }
    Ok(z)
}

/// Routing distribution `softmax(h^T theta)`.
pub fn gate_forward(h: &[f64], theta: &Matrix) -> Result<Vec<f64>, GateError> {
    gate_logits(h, theta).map(|z| softmax(&z))
}

/// Indices of the `k` largest scores, by descending score. Ties go to the
/// lowest index.
pub fn topk(scores: &[f64], k: usize) -> Result<Vec<usize>, GateError> {
    if k > scores.len() {
        return Err(GateError::BadK { k, n: scores.len() });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Gap between the K-th and (K+1)-th largest probabilities.
pub fn probability_margin(q: &[f64], k: usize) -> Result<f64, GateError> {
    if k == 0 || k >= q.len() {
        return Err(GateError::BadK { k, n: q.len() });
    }
    let mut sorted = q.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[k - 1] - sorted[k])
}

pub fn sup_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn l1_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

/// `KL(P || Q)` with `0 log 0 = 0` and `Q` floored at [`KL_EPS`].
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(KL_EPS).ln()))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityVerdict {
    pub margin: f64,
    pub sup_distance: f64,
    /// Whether `||P - Q||_inf < margin / 2`.
    pub condition_met: bool,
    pub sets_equal: bool,
}

impl StabilityVerdict {
    /// False only when the margin condition held and the Top-K set still
    /// changed.
    pub fn holds(&self) -> bool {
        !self.condition_met || self.sets_equal
    }
}

pub fn stability_check(q: &[f64], p: &[f64], k: usize) -> Result<StabilityVerdict, GateError> {
    if p.len() != q.len() {
        return Err(GateError::Shape("distributions differ in length".into()));
    }
    let margin = probability_margin(q, k)?;
    let sup = sup_distance(p, q);
    let mut a = topk(p, k)?;
    let mut b = topk(q, k)?;
    a.sort_unstable();
    b.sort_unstable();
    Ok(StabilityVerdict {
        margin,
        sup_distance: sup,
        condition_met: sup < margin / 2.0,
        sets_equal: a == b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PinskerVerdict {
    pub l1: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `||P - Q||_1 <= sqrt(2 KL(P || Q))`, with `Q` floored at [`KL_EPS`].
pub fn pinsker_check(p: &[f64], q: &[f64]) -> PinskerVerdict {
    let l1 = l1_distance(p, q);
    let bound = (2.0 * kl(p, q).max(0.0)).sqrt();
    PinskerVerdict {
        l1,
        bound,
        holds: l1 <= bound + 1e-9,
    }
}

/// Random point on the probability simplex; `sharpness` scales the log-weights.
pub fn random_distribution<R: Rng>(rng: &mut R, n: usize, sharpness: f64) -> Vec<f64> {
    let z: Vec<f64> = (0..n).map(|_| sharpness * rng.random_range(-1.0..1.0)).collect();
    softmax(&z)
}

/// Draw `P` with `||P - Q||_inf < radius` on the simplex by rejection: a
/// uniform box perturbation is re-centred to preserve the total mass and
/// rejected if it leaves the simplex or the ball.
pub fn perturb_within<R: Rng>(rng: &mut R, q: &[f64], radius: f64) -> Option<Vec<f64>> {
    if !(radius > 0.0) {
        return None;
    }
    for _ in 0..1000 {
        let mut delta: Vec<f64> = q.iter().map(|_| rng.random_range(-radius..radius)).collect();
        let mean = delta.iter().sum::<f64>() / delta.len() as f64;
        delta.iter_mut().for_each(|d| *d -= mean);
        let p: Vec<f64> = q.iter().zip(&delta).map(|(a, d)| a + d).collect();
        if p.iter().all(|x| *x >= 0.0) && sup_distance(&p, q) < radius {
            return Some(p);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CampaignSummary {
    /// Random draws made.
    pub draws: usize,
    /// Trials where the check's precondition was met.
    pub checked: usize,
    pub failures: usize,
}

/// Random (Q, P) draws with P inside half the Top-K margin of Q, repeated
/// until `trials` draws meet the margin condition (or `20 * trials` draws
/// have been made); counts any Top-K change.
pub fn stability_campaign(trials: usize, seed: u64) -> CampaignSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut failures = 0;
    let mut draws = 0;
    while checked < trials && draws < trials.saturating_mul(20) {
        draws += 1;
        let n = rng.random_range(3..=16);
        let k = rng.random_range(1..n);
        let sharp = rng.random_range(0.5..6.0);
        let q = random_distribution(&mut rng, n, sharp);
        let gamma = probability_margin(&q, k).expect("1 <= k < n");
        // radius strictly inside gamma / 2
        let radius = gamma / 2.0 * rng.random_range(0.05..1.0);
        let Some(p) = perturb_within(&mut rng, &q, radius) else {
            continue;
        };
        let v = stability_check(&q, &p, k).expect("shapes match");
        if v.condition_met {
            checked += 1;
            if !v.sets_equal {
                failures += 1;
            }
        }
    }
    CampaignSummary {
        draws,
        checked,
        failures,
    }
}

pub fn pinsker_campaign(trials: usize, seed: u64) -> CampaignSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..trials {
        let n = rng.random_range(2..=32);
        let (sp, sq) = (rng.random_range(0.1..8.0), rng.random_range(0.1..8.0));
        let p = random_distribution(&mut rng, n, sp);
        let q = random_distribution(&mut rng, n, sq);
        if !pinsker_check(&p, &q).holds {
            failures += 1;
        }
    }
    CampaignSummary {
        draws: trials,
        checked: trials,
        failures,
    }
}

const GATE_MAGIC: &[u8; 4] = b"GATE";
const ENDIAN_LITTLE: u8 = b'L';

#[derive(Debug, Serialize, Deserialize)]
struct GateSidecar {
    hidden_dim: usize,
    n_routed_experts: usize,
    dtype: String,
    endianness: String,
    layout: String,
}

/// Write `theta` as a binary matrix (magic, endianness tag, d, N_r, then
/// little-endian f64 values in row-major order) plus a `<path>.json` sidecar.
pub fn save_matrix(path: &Path, m: &Matrix) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(24 + m.data.len() * 8);
    buf.extend_from_slice(GATE_MAGIC);
    buf.extend_from_slice(&[ENDIAN_LITTLE, 0, 0, 0]);
    buf.extend_from_slice(&(m.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u64).to_le_bytes());
    for x in &m.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    crate::cli::output::write_atomic(path, &buf)?;
    let sidecar = GateSidecar {
        hidden_dim: m.rows,
        n_routed_experts: m.cols,
        dtype: "f64".into(),
        endianness: "little".into(),
        layout: "row-major".into(),
    };
    let mut json = serde_json::to_vec_pretty(&sidecar)?;
    json.push(b'\n');
    crate::cli::output::write_atomic(&sidecar_path(path), &json)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn load_matrix(path: &Path) -> std::io::Result<Matrix> {
    let invalid = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string());
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..4] != GATE_MAGIC {
        return Err(invalid("not a gate matrix file"));
    }
    if bytes[4] != ENDIAN_LITTLE {
        return Err(invalid("unsupported endianness tag"));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    let (rows, cols) = (word(8), word(16));
    let body = &bytes[24..];
    if body.len() != rows * cols * 8 {
        return Err(invalid("matrix body length does not match header"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix { rows, cols, data })
}
