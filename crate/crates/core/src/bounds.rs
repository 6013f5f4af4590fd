//! Executable checks of the overlap-to-fetch bounds.
//!
//! Under a clean per-layer cache (capacity at least K, serve-and-admit
//! updates, per-request resets, nothing touching the cache between steps)
//! the experts fetched at step t never exceed `K - |E_t ∩ E_{t-1}|`, and with
//! LRU never exceed `K - |E_t ∩ U_{t,L_t}|` where `U_{t,L_t}` is the largest
//! recent working set that fits in the cache. This module measures both on
//! simulated executions and constructs the scenarios in which they break.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{simulate_layers, CacheConfig, Policy, SimError};
use crate::metrics::overlap;
use crate::trace::{synth_trace, RoutingTrace, StepRecord, SynthConfig, TraceHeader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    /// Capacity below K; no injection, the config itself is the fault.
    UnderCapacity,
    /// Evict `n` random residents between steps.
    Interference,
    /// Insert `n` non-resident experts between steps, evicting by policy.
    Prefetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultScenario {
    pub kind: FaultKind,
    pub n: usize,
    pub seed: u64,
}

/// The cache-model assumption a scenario breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assumption {
    /// The cache holds at least one full routed set (C >= K).
    Capacity,
    /// Served experts are retained through the next step.
    StepAtomicityAdmission,
    /// Nothing else inserts into or evicts from the cache between steps.
    Isolation,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BoundError {
    #[error("precondition not met: {0}")]
    Precondition(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepBound {
    pub segment: usize,
    pub step: usize,
    pub n_fetch: u64,
    /// `K - |E_t ∩ E_{t-1}|`, i.e. `K (1 - IR_t)`.
    pub bound: u64,
    pub violated: bool,
    /// Working-set horizon `L_t` and its bound, when computed.
    pub ws_horizon: Option<usize>,
    pub ws_bound: Option<u64>,
    pub ws_violated: bool,
    /// Resident set before the step; kept only for violating steps.
    pub resident: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceBound {
    pub segment: usize,
    pub layer: usize,
    pub batch: usize,
    pub avg_fetch: f64,
    /// `K (1 - EOR)` of this sequence.
    pub avg_bound: f64,
    pub avg_violated: bool,
    pub steps: Vec<StepBound>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub capacity: usize,
    pub top_k: usize,
    pub policy: Policy,
    pub sequences: Vec<SequenceBound>,
    pub steps_checked: usize,
    pub step_violations: usize,
    pub avg_violations: usize,
    pub ws_violations: usize,
    /// Steps where the working-set bound is strictly below the step bound.
    pub ws_tighter_steps: usize,
    /// Per batch item, per flattened step: fetches summed over layers.
    pub cross_layer_fetches: Vec<Vec<u64>>,
}

impl BoundReport {
    pub fn violations(&self) -> usize {
        self.step_violations + self.avg_violations + self.ws_violations
    }

    pub fn violating_steps(&self) -> impl Iterator<Item = (&SequenceBound, &StepBound)> {
        self.sequences
            .iter()
            .flat_map(|s| s.steps.iter().filter(|b| b.violated).map(move |b| (s, b)))
    }
}

/// `L_t` and `|E_t ∩ U_{t,L_t}|` for step `t >= 1` of a sequence.
fn working_set(sets: &[&[usize]], t: usize, capacity: usize) -> (usize, usize) {
    let mut union: Vec<usize> = Vec::new();
    let mut horizon = 0;
    let mut best: Vec<usize> = Vec::new();
    for ell in 1..=t {
        for &e in sets[t - ell] {
            if !union.contains(&e) {
                union.push(e);
            }
        }
        if union.len() > capacity {
            break;
        }
        horizon = ell;
        best.clone_from(&union);
    }
    (horizon, overlap(&best, sets[t]))
}

/// Measure the bounds on one trace without checking preconditions.
pub fn evaluate_bounds(
    trace: &RoutingTrace,
    cfg: &CacheConfig,
    with_working_set: bool,
) -> Result<BoundReport, BoundError> {
    let h = trace.header;
    let k = h.top_k;
    let mut sequences = Vec::new();
    let mut cross_layer_fetches = Vec::with_capacity(h.batch_size);

    for b in 0..h.batch_size {
        let slice = trace.batch_slice(b);
        let runs = simulate_layers(&slice, cfg, true)?;
        let mut cross = vec![0u64; slice.total_steps()];
        for run in &runs {
            for (g, st) in run.steps.iter().enumerate() {
                cross[g] += st.unique_misses;
            }
        }
        cross_layer_fetches.push(cross);

        for run in &runs {
            let states = run.pre_resident.as_ref().expect("states recorded");
            for (s, &len) in slice.segment_lengths().iter().enumerate() {
                if len < 2 {
                    continue;
                }
                let offset = slice.segment_offset(s);
                let sets: Vec<&[usize]> = slice
                    .sequence(s, run.layer, 0)
                    .map(|r: &StepRecord| r.topk.as_slice())
                    .collect();
                let mut steps = Vec::with_capacity(len - 1);
                let mut fetch_sum = 0u64;
                let mut ir_sum = 0.0;
                for t in 1..len {
                    let g = offset + t;
                    let n_fetch = run.steps[g].unique_misses;
                    let shared = overlap(sets[t - 1], sets[t]);
                    let bound = (k - shared) as u64;
                    let (ws_horizon, ws_bound) = if with_working_set {
                        let (horizon, kept) = working_set(&sets, t, cfg.capacity);
                        if horizon == 0 {
                            (Some(0), None)
                        } else {
                            (Some(horizon), Some((k - kept) as u64))
                        }
                    } else {
                        (None, None)
                    };
                    let violated = n_fetch > bound;
                    let ws_violated = ws_bound.is_some_and(|w| n_fetch > w);
                    fetch_sum += n_fetch;
                    ir_sum += shared as f64 / k as f64;
                    steps.push(StepBound {
                        segment: s,
                        step: t,
                        n_fetch,
                        bound,
                        violated,
                        ws_horizon,
                        ws_bound,
                        ws_violated,
                        resident: (violated || ws_violated).then(|| states[g].clone()),
                    });
                }
                let pairs = (len - 1) as f64;
                let avg_fetch = fetch_sum as f64 / pairs;
                let eor = ir_sum / pairs;
                let avg_bound = k as f64 * (1.0 - eor);
                sequences.push(SequenceBound {
                    segment: s,
                    layer: run.layer,
                    batch: b,
                    avg_fetch,
                    avg_bound,
                    avg_violated: avg_fetch > avg_bound + 1e-9,
                    steps,
                });
            }
        }
    }

    let all_steps = || sequences.iter().flat_map(|s| s.steps.iter());
    Ok(BoundReport {
        capacity: cfg.capacity,
        top_k: k,
        policy: cfg.policy,
        steps_checked: all_steps().count(),
        step_violations: all_steps().filter(|b| b.violated).count(),
        avg_violations: sequences.iter().filter(|s| s.avg_violated).count(),
        ws_violations: all_steps().filter(|b| b.ws_violated).count(),
        ws_tighter_steps: all_steps()
            .filter(|b| b.ws_bound.is_some_and(|w| w < b.bound))
            .count(),
        cross_layer_fetches,
        sequences,
    })
}

fn clean_preconditions(trace: &RoutingTrace, cfg: &CacheConfig) -> Result<(), BoundError> {
    let pre = |msg: &str| Err(BoundError::Precondition(msg.to_string()));
    if cfg.capacity < trace.header.top_k {
        return pre("capacity must be at least top_k");
    }
    if !cfg.reset_each_segment {
        return pre("the cache must reset at every segment");
    }
    if cfg.scenario.is_some() {
        return pre("no fault scenario may be active");
    }
    if cfg.reroute_beta.is_some() {
        return pre("rerouting must be disabled");
    }
    Ok(())
}

/// Check `N_fetch(t) <= K (1 - IR_t)` for every step and the averaged form
/// for every sequence. Multi-batch traces are checked per batch index.
pub fn check_step_bound(trace: &RoutingTrace, cfg: &CacheConfig) -> Result<BoundReport, BoundError> {
    clean_preconditions(trace, cfg)?;
    evaluate_bounds(trace, cfg, false)
}

/// Check the working-set bound (LRU only) alongside the step bound.
pub fn check_working_set_bound(trace: &RoutingTrace, capacity: usize) -> Result<BoundReport, BoundError> {
    let cfg = CacheConfig::new(capacity, Policy::Lru);
    clean_preconditions(trace, &cfg)?;
    evaluate_bounds(trace, &cfg, true)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioOutcome {
    pub name: String,
    pub kind: FaultKind,
    pub broken: Assumption,
    pub capacity: usize,
    pub top_k: usize,
    pub violations: usize,
    pub first_violation: Option<StepBound>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub scenarios: Vec<ScenarioOutcome>,
}

impl CounterexampleReport {
    pub fn all_violate(&self) -> bool {
        self.scenarios.iter().all(|s| s.violations > 0)
    }
}

/// A single-layer, single-segment trace that requests `set` at every step.
pub fn constant_trace(n_experts: usize, set: &[usize], steps: usize) -> RoutingTrace {
    let header = TraceHeader {
        n_moe_layers: 1,
        n_routed_experts: n_experts,
        top_k: set.len(),
        batch_size: 1,
        has_probs: false,
    };
    let records = (0..steps)
        .map(|t| StepRecord {
            segment: 0,
            step: t,
            layer: 0,
            batch: 0,
            topk: set.to_vec(),
            probs: None,
        })
        .collect();
    RoutingTrace::new(header, records).expect("valid constant trace")
}

fn run_scenario(
    name: &str,
    trace: &RoutingTrace,
    cfg: CacheConfig,
    kind: FaultKind,
    broken: Assumption,
) -> Result<ScenarioOutcome, BoundError> {
    let report = evaluate_bounds(trace, &cfg, false)?;
    let first_violation = report.violating_steps().next().map(|(_, b)| b.clone());
    Ok(ScenarioOutcome {
        name: name.to_string(),
        kind,
        broken,
        capacity: cfg.capacity,
        top_k: trace.header.top_k,
        violations: report.step_violations,
        first_violation,
    })
}

/// Construct one trace per failure mode and measure the step bound on it.
/// Every scenario reuses the full routed set at every step, so the bound is
/// zero from the second step on and any fetch is a violation.
pub fn run_counterexamples() -> Result<CounterexampleReport, BoundError> {
    let set: Vec<usize> = (0..6).collect();
    let trace = constant_trace(16, &set, 8);
    let under = CacheConfig::new(4, Policy::Lru);
    let faulted = |kind| CacheConfig {
        scenario: Some(FaultScenario { kind, n: 1, seed: 17 }),
        ..CacheConfig::new(set.len(), Policy::Lru)
    };
    Ok(CounterexampleReport {
        scenarios: vec![
            run_scenario(
                "under-capacity",
                &trace,
                under,
                FaultKind::UnderCapacity,
                Assumption::Capacity,
            )?,
            run_scenario(
                "interference",
                &trace,
                faulted(FaultKind::Interference),
                FaultKind::Interference,
                Assumption::Isolation,
            )?,
            run_scenario(
                "prefetch",
                &trace,
                faulted(FaultKind::Prefetch),
                FaultKind::Prefetch,
                Assumption::Isolation,
            )?,
        ],
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CampaignReport {
    pub traces: usize,
    pub runs: usize,
    pub steps_checked: usize,
    pub step_violations: usize,
    pub avg_violations: usize,
    pub ws_runs: usize,
    pub ws_violations: usize,
}

impl CampaignReport {
    fn absorb(&mut self, r: &BoundReport) {
        self.runs += 1;
        self.steps_checked += r.steps_checked;
        self.step_violations += r.step_violations;
        self.avg_violations += r.avg_violations;
        self.ws_violations += r.ws_violations;
    }

    pub fn clean(&self) -> bool {
        self.step_violations == 0 && self.avg_violations == 0 && self.ws_violations == 0
    }
}

/// Random generator settings for one campaign trace.
pub fn campaign_config(seed: u64) -> SynthConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top_k = rng.random_range(1..=6);
    SynthConfig {
        n_moe_layers: rng.random_range(1..=2),
        n_routed_experts: rng.random_range(top_k + 1..=32),
        top_k,
        batch_size: 1,
        n_segments: rng.random_range(1..=3),
        steps_per_segment: rng.random_range(2..=40),
        stickiness: rng.random_range(0.0..=1.0),
        seed: rng.random(),
        emit_probs: false,
        concentration: 1.0,
        independent_batches: false,
    }
}

/// Randomized campaign: each trace is checked at `C in {K, K+2, 2K}` (or at
/// the fixed `capacity`), with the working-set bound checked at `C = 2K`.
pub fn bound_campaign(n_traces: usize, seed: u64, capacity: Option<usize>) -> Result<CampaignReport, BoundError> {
    let reports: Vec<Result<CampaignReport, BoundError>> = (0..n_traces)
        .into_par_iter()
        .map(|i| {
            let cfg = campaign_config(seed.wrapping_add(i as u64));
            let trace = synth_trace(&cfg).map_err(|e| BoundError::Precondition(e.to_string()))?;
            let k = cfg.top_k;
            let mut out = CampaignReport {
                traces: 1,
                ..Default::default()
            };
            let caps = match capacity {
                Some(c) => vec![c],
                None => vec![k, k + 2, 2 * k],
            };
            for c in caps {
                if c == 2 * k || capacity.is_some() {
                    let r = check_working_set_bound(&trace, c)?;
                    out.absorb(&r);
                    out.ws_runs += 1;
                } else {
                    out.absorb(&check_step_bound(&trace, &CacheConfig::new(c, Policy::Lru))?);
                }
            }
            Ok(out)
        })
        .collect();
    let mut total = CampaignReport::default();
    for r in reports {
        let r = r?;
        total.traces += r.traces;
        total.runs += r.runs;
        total.steps_checked += r.steps_checked;
        total.step_violations += r.step_violations;
        total.avg_violations += r.avg_violations;
        total.ws_runs += r.ws_runs;
        total.ws_violations += r.ws_violations;
    }
    Ok(total)
}
