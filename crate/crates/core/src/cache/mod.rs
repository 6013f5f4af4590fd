//! Trace-driven per-layer expert cache simulation.
//!
//! Each step of a layer flattens the routed slots of every batch item (token
//! level, `B*K` events), deduplicates them in order (unique level), counts
//! hits against the resident set as it stood before the step, then admits the
//! requested experts, evicting only experts that were not requested in the
//! same step.

mod state;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use state::{LayerCache, Policy, NEVER};

use crate::bounds::{FaultKind, FaultScenario};
use crate::gate::topk;
use crate::metrics;
use crate::trace::RoutingTrace;

/// Floor added to probabilities before taking logs for rerouting.
pub const REROUTE_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("cache capacity must be >= 1")]
    ZeroCapacity,
    #[error("reroute strength must be finite and >= 0 (got {0})")]
    BadBeta(f64),
    #[error("rerouting requires routing distributions in the trace")]
    RerouteWithoutProbs,
    #[error("belady needs every future request up front, which rerouting does not provide")]
    BeladyNeedsFullTrace,
    #[error("fault scenario needs n >= 1")]
    BadScenario,
    #[error("percentile of an empty series")]
    EmptySeries,
    #[error("percentile rank must lie in (0, 1] (got {0})")]
    BadRank(f64),
    #[error("io model fields must be positive: {0}")]
    BadIoModel(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity: usize,
    pub policy: Policy,
    pub reset_each_segment: bool,
    /// Residency bonus for cache-aware rerouting; `None` disables rerouting.
    pub reroute_beta: Option<f64>,
    pub scenario: Option<FaultScenario>,
}

impl CacheConfig {
    pub fn new(capacity: usize, policy: Policy) -> Self {
        Self {
            capacity,
            policy,
            reset_each_segment: true,
            reroute_beta: None,
            scenario: None,
        }
    }

    fn check(&self, trace: &RoutingTrace) -> Result<(), SimError> {
        if self.capacity == 0 {
            return Err(SimError::ZeroCapacity);
        }
        if let Some(beta) = self.reroute_beta {
            if !(beta >= 0.0 && beta.is_finite()) {
                return Err(SimError::BadBeta(beta));
            }
            if !trace.header.has_probs {
                return Err(SimError::RerouteWithoutProbs);
            }
            if self.policy == Policy::Belady {
                return Err(SimError::BeladyNeedsFullTrace);
            }
        }
        if let Some(s) = &self.scenario {
            if s.kind != FaultKind::UnderCapacity && s.n == 0 {
                return Err(SimError::BadScenario);
            }
        }
        Ok(())
    }
}

/// Hit/miss counts of one (segment, step, layer).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepCacheStats {
    pub unique_hits: u64,
    pub unique_total: u64,
    pub unique_misses: u64,
    pub token_hits: u64,
    pub token_total: u64,
    pub token_misses: u64,
}

/// Order-preserving deduplication.
pub fn dedupe(slots: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(slots.len());
    for &e in slots {
        if !out.contains(&e) {
            out.push(e);
        }
    }
    out
}

/// Next-request table for one layer, built by a backward scan. Entry
/// `[g]` lists each distinct expert requested at flattened step `g` with the
/// flattened step of its next request, or [`NEVER`].
#[derive(Debug, Clone, PartialEq)]
pub struct NextUseTable {
    steps: Vec<Vec<(usize, usize)>>,
    horizon_end: Vec<usize>,
}

impl NextUseTable {
    /// `cut_at_segments` ends every horizon at its segment boundary, which is
    /// what a per-segment cache reset implies.
    pub fn build(trace: &RoutingTrace, layer: usize, cut_at_segments: bool) -> Self {
        let total = trace.total_steps();
        let requests: Vec<Vec<usize>> = (0..total).map(|g| step_request(trace, g, layer)).collect();
        Self::from_requests(trace, &requests, cut_at_segments)
    }

    fn from_requests(trace: &RoutingTrace, requests: &[Vec<usize>], cut: bool) -> Self {
        let total = requests.len();
        let mut horizon_end = vec![total; total];
        if cut {
            for (s, &len) in trace.segment_lengths().iter().enumerate() {
                let start = trace.segment_offset(s);
                horizon_end[start..start + len].fill(start + len);
            }
        }
        let n = trace.header.n_routed_experts;
        let mut next_seen = vec![NEVER; n];
        let mut steps = vec![Vec::new(); total];
        for g in (0..total).rev() {
            if g + 1 < total && horizon_end[g] != horizon_end[g + 1] {
                next_seen.iter_mut().for_each(|x| *x = NEVER);
            }
            steps[g] = requests[g].iter().map(|&e| (e, next_seen[e])).collect();
            for &e in &requests[g] {
                next_seen[e] = g;
            }
        }
        Self { steps, horizon_end }
    }

    /// Next request step of `expert` after flattened step `step`, if `expert`
    /// is requested at `step`.
    pub fn next_use(&self, step: usize, expert: usize) -> Option<usize> {
        self.steps[step]
            .iter()
            .find(|(e, _)| *e == expert)
            .map(|&(_, nu)| nu)
    }

    pub fn step(&self, step: usize) -> &[(usize, usize)] {
        &self.steps[step]
    }

    /// Forward search for the next request strictly after `step`.
    fn next_request_after(&self, step: usize, expert: usize) -> usize {
        (step + 1..self.horizon_end[step])
            .find(|&g| self.steps[g].iter().any(|(e, _)| *e == expert))
            .unwrap_or(NEVER)
    }
}

/// Next-use table for a layer with horizons cut at segment boundaries.
pub fn belady_next_use(trace: &RoutingTrace, layer: usize) -> NextUseTable {
    NextUseTable::build(trace, layer, true)
}

fn step_request(trace: &RoutingTrace, g: usize, layer: usize) -> Vec<usize> {
    let slots: Vec<usize> = (0..trace.header.batch_size)
        .flat_map(|b| trace.record_at(g, layer, b).topk.iter().copied())
        .collect();
    dedupe(&slots)
}

/// Top-K of `log(p + eps) + beta * [expert is resident]`, ties to the lowest
/// index. With `beta = 0` this is the plain Top-K of `probs`.
pub fn reroute_topk(probs: &[f64], resident: &[usize], beta: f64, k: usize) -> Vec<usize> {
    let scores: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let bonus = if resident.contains(&i) { beta } else { 0.0 };
            (p + REROUTE_EPS).ln() + bonus
        })
        .collect();
    topk(&scores, k).expect("k <= N_r")
}

/// Result of simulating one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRun {
    pub layer: usize,
    /// Indexed by flattened step.
    pub steps: Vec<StepCacheStats>,
    /// Sorted resident set before each step, when requested.
    pub pre_resident: Option<Vec<Vec<usize>>>,
    pub evictions: u64,
    pub final_resident: Vec<usize>,
    /// Per flattened step, the routed set of each batch item after rerouting.
    pub routed: Option<Vec<Vec<Vec<usize>>>>,
}

fn fault_rng(s: &FaultScenario, layer: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(s.seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn inject_fault(
    cache: &mut LayerCache,
    scenario: &FaultScenario,
    rng: &mut ChaCha8Rng,
    n_experts: usize,
    table: Option<&NextUseTable>,
    prev_step: usize,
) {
    match scenario.kind {
        FaultKind::UnderCapacity => {}
        FaultKind::Interference => {
            let resident = cache.resident_sorted();
            let n = scenario.n.min(resident.len());
            for i in index::sample(rng, resident.len(), n).into_iter() {
                cache.evict(resident[i]);
            }
        }
        FaultKind::Prefetch => {
            let outside: Vec<usize> = (0..n_experts).filter(|&e| !cache.contains(e)).collect();
            let n = scenario.n.min(outside.len());
            for i in index::sample(rng, outside.len(), n).into_iter() {
                let e = outside[i];
                let nu = table.map_or(NEVER, |t| t.next_request_after(prev_step, e));
                cache.insert_unrequested(e, nu);
            }
        }
    }
}

/// Simulate one layer over the whole trace.
pub fn simulate_layer(
    trace: &RoutingTrace,
    layer: usize,
    cfg: &CacheConfig,
    record_states: bool,
) -> Result<LayerRun, SimError> {
    cfg.check(trace)?;
    let h = trace.header;
    let mut cache = LayerCache::new(h.n_routed_experts, cfg.capacity, cfg.policy);
    let table = (cfg.policy == Policy::Belady)
        .then(|| NextUseTable::build(trace, layer, cfg.reset_each_segment));
    let mut rng = cfg.scenario.as_ref().map(|s| fault_rng(s, layer));
    let total = trace.total_steps();
    let mut steps = Vec::with_capacity(total);
    let mut pre_resident = record_states.then(|| Vec::with_capacity(total));
    let mut routed = cfg.reroute_beta.map(|_| Vec::with_capacity(total));
    let clean = cfg.scenario.as_ref().is_none_or(|s| s.kind == FaultKind::UnderCapacity);
    let mut prev_unique: Vec<usize> = Vec::new();

    for (s, &len) in trace.segment_lengths().iter().enumerate() {
        let offset = trace.segment_offset(s);
        for t in 0..len {
            let g = offset + t;
            if t == 0 && cfg.reset_each_segment {
                cache.reset();
            } else if g > 0 {
                if let (Some(scenario), Some(rng)) = (&cfg.scenario, rng.as_mut()) {
                    inject_fault(&mut cache, scenario, rng, h.n_routed_experts, table.as_ref(), g - 1);
                } else if clean && cfg.capacity >= prev_unique.len() {
                    debug_assert!(
                        prev_unique.iter().all(|&e| cache.contains(e)),
                        "previous-step experts must remain resident"
                    );
                }
            }
            if let Some(states) = pre_resident.as_mut() {
                states.push(cache.resident_sorted());
            }

            let sets: Vec<Vec<usize>> = (0..h.batch_size)
                .map(|b| {
                    let rec = trace.record_at(g, layer, b);
                    match (cfg.reroute_beta, &rec.probs) {
                        (Some(beta), Some(p)) => {
                            let resident = cache.resident_sorted();
                            let mut new = reroute_topk(p, &resident, beta, h.top_k);
                            let mut a = new.clone();
                            let mut c = rec.topk.clone();
                            a.sort_unstable();
                            c.sort_unstable();
                            if a == c {
                                new = rec.topk.clone();
                            }
                            new
                        }
                        _ => rec.topk.clone(),
                    }
                })
                .collect();

            let slots: Vec<usize> = sets.iter().flatten().copied().collect();
            let unique = dedupe(&slots);
            let token_hits = slots.iter().filter(|&&e| cache.contains(e)).count() as u64;
            let unique_hits = unique.iter().filter(|&&e| cache.contains(e)).count() as u64;
            let stats = StepCacheStats {
                unique_hits,
                unique_total: unique.len() as u64,
                unique_misses: unique.len() as u64 - unique_hits,
                token_hits,
                token_total: slots.len() as u64,
                token_misses: slots.len() as u64 - token_hits,
            };
            steps.push(stats);

            let next_uses: Option<Vec<usize>> = table.as_ref().map(|tab| {
                unique
                    .iter()
                    .map(|&e| tab.next_use(g, e).unwrap_or(NEVER))
                    .collect()
            });
            cache.serve(&unique, next_uses.as_deref());
            prev_unique = unique;
            if let Some(r) = routed.as_mut() {
                r.push(sets);
            }
        }
    }

    Ok(LayerRun {
        layer,
        steps,
        pre_resident,
        evictions: cache.evictions(),
        final_resident: cache.resident_sorted(),
        routed,
    })
}

/// Simulate every layer; layers run in parallel and are returned in order.
pub fn simulate_layers(
    trace: &RoutingTrace,
    cfg: &CacheConfig,
    record_states: bool,
) -> Result<Vec<LayerRun>, SimError> {
    cfg.check(trace)?;
    (0..trace.header.n_moe_layers)
        .into_par_iter()
        .map(|l| simulate_layer(trace, l, cfg, record_states))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheTotals {
    pub unique_hits: u64,
    pub unique_total: u64,
    pub unique_misses: u64,
    pub token_hits: u64,
    pub token_total: u64,
    pub token_misses: u64,
    pub evictions: u64,
}

impl CacheTotals {
    fn add_step(&mut self, s: &StepCacheStats) {
        self.unique_hits += s.unique_hits;
        self.unique_total += s.unique_total;
        self.unique_misses += s.unique_misses;
        self.token_hits += s.token_hits;
        self.token_total += s.token_total;
        self.token_misses += s.token_misses;
    }

    fn add(&mut self, o: &CacheTotals) {
        self.unique_hits += o.unique_hits;
        self.unique_total += o.unique_total;
        self.unique_misses += o.unique_misses;
        self.token_hits += o.token_hits;
        self.token_total += o.token_total;
        self.token_misses += o.token_misses;
        self.evictions += o.evictions;
    }

    /// Unique hit rate.
    pub fn uhr(&self) -> f64 {
        ratio(self.unique_hits, self.unique_total)
    }

    /// Token hit rate.
    pub fn thr(&self) -> f64 {
        ratio(self.token_hits, self.token_total)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub totals: CacheTotals,
    pub uhr: f64,
    pub thr: f64,
}

/// Cross-layer aggregate of one (segment, step).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepPoint {
    pub segment: usize,
    pub step: usize,
    pub unique_misses: u64,
    pub token_hits: u64,
    pub token_total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Percentiles {
    pub fn of(series: &[f64]) -> Result<Self, SimError> {
        Ok(Self {
            p50: percentile(series, 0.50)?,
            p95: percentile(series, 0.95)?,
            p99: percentile(series, 0.99)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub capacity: usize,
    pub policy: Policy,
    pub layers: Vec<LayerReport>,
    pub all: CacheTotals,
    pub uhr: f64,
    pub thr: f64,
    pub steps: Vec<StepPoint>,
    pub unique_miss_percentiles: Option<Percentiles>,
    /// Expert overlap of the routing actually served, when rerouting.
    pub rerouted_eor: Option<f64>,
}

impl SimReport {
    /// Everything except the rerouting side-channel, for comparing runs.
    pub fn cache_view(&self) -> (&[LayerReport], &CacheTotals, &[StepPoint], &Option<Percentiles>) {
        (&self.layers, &self.all, &self.steps, &self.unique_miss_percentiles)
    }

    pub fn unique_miss_series(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.unique_misses as f64).collect()
    }
}

pub fn simulate(trace: &RoutingTrace, cfg: &CacheConfig) -> Result<SimReport, SimError> {
    let runs = simulate_layers(trace, cfg, false)?;
    Ok(build_report(trace, cfg, &runs))
}

pub fn build_report(trace: &RoutingTrace, cfg: &CacheConfig, runs: &[LayerRun]) -> SimReport {
    let mut all = CacheTotals::default();
    let mut layers = Vec::with_capacity(runs.len());
    for run in runs {
        let mut totals = CacheTotals {
            evictions: run.evictions,
            ..Default::default()
        };
        run.steps.iter().for_each(|s| totals.add_step(s));
        all.add(&totals);
        layers.push(LayerReport {
            layer: run.layer,
            uhr: totals.uhr(),
            thr: totals.thr(),
            totals,
        });
    }

    let mut steps = Vec::with_capacity(trace.total_steps());
    for (s, &len) in trace.segment_lengths().iter().enumerate() {
        for t in 0..len {
            let g = trace.segment_offset(s) + t;
            let mut p = StepPoint {
                segment: s,
                step: t,
                unique_misses: 0,
                token_hits: 0,
                token_total: 0,
            };
            for run in runs {
                p.unique_misses += run.steps[g].unique_misses;
                p.token_hits += run.steps[g].token_hits;
                p.token_total += run.steps[g].token_total;
            }
            steps.push(p);
        }
    }
    let series: Vec<f64> = steps.iter().map(|s| s.unique_misses as f64).collect();

    let rerouted_eor = cfg.reroute_beta.and_then(|_| {
        let h = trace.header;
        let sets: Vec<Vec<usize>> = trace
            .records()
            .iter()
            .map(|r| {
                let g = trace.segment_offset(r.segment) + r.step;
                runs[r.layer].routed.as_ref().expect("rerouted sets")[g][r.batch].clone()
            })
            .collect();
        debug_assert_eq!(sets.len(), trace.total_steps() * h.n_moe_layers * h.batch_size);
        metrics::eor(&trace.with_sets(sets)).ok().map(|r| r.mean)
    });

    SimReport {
        capacity: cfg.capacity,
        policy: cfg.policy,
        layers,
        uhr: all.uhr(),
        thr: all.thr(),
        all,
        unique_miss_percentiles: Percentiles::of(&series).ok(),
        steps,
        rerouted_eor,
    }
}

/// Nearest-rank percentile: element `ceil(rank * n) - 1` of the sorted series.
pub fn percentile(series: &[f64], rank: f64) -> Result<f64, SimError> {
    if series.is_empty() {
        return Err(SimError::EmptySeries);
    }
    if !(rank > 0.0 && rank <= 1.0) {
        return Err(SimError::BadRank(rank));
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // guard against rank * n landing a hair above an integer
    let pos = (rank * n as f64 - 1e-9).ceil() as usize;
    Ok(sorted[pos.clamp(1, n) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoModel {
    pub expert_bytes: f64,
    pub bandwidth_gbps: f64,
    pub compute_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TpotReport {
    pub io_ms: Vec<f64>,
    pub tpot_ms: Vec<f64>,
    pub io_percentiles: Percentiles,
    pub tpot_percentiles: Percentiles,
}

/// Per-step I/O time of unique misses and the resulting per-token latency:
/// `io_ms = misses * expert_bytes / bandwidth * 1000`,
/// `tpot_ms = compute_ms + io_ms / batch`.
pub fn estimate_tpot_series(
    unique_misses: &[f64],
    io: &IoModel,
    batch: usize,
) -> Result<TpotReport, SimError> {
    if !(io.bandwidth_gbps > 0.0) {
        return Err(SimError::BadIoModel("bandwidth_gbps"));
    }
    if !(io.expert_bytes > 0.0) {
        return Err(SimError::BadIoModel("expert_bytes"));
    }
    if !(io.compute_ms >= 0.0) {
        return Err(SimError::BadIoModel("compute_ms"));
    }
    if batch == 0 {
        return Err(SimError::BadIoModel("batch"));
    }
    let bytes_per_s = io.bandwidth_gbps * 1e9;
    let io_ms: Vec<f64> = unique_misses
        .iter()
        .map(|m| m * io.expert_bytes / bytes_per_s * 1000.0)
        .collect();
    let tpot_ms: Vec<f64> = io_ms.iter().map(|x| io.compute_ms + x / batch as f64).collect();
    Ok(TpotReport {
        io_percentiles: Percentiles::of(&io_ms)?,
        tpot_percentiles: Percentiles::of(&tpot_ms)?,
        io_ms,
        tpot_ms,
    })
}

pub fn estimate_tpot(report: &SimReport, io: &IoModel, batch: usize) -> Result<TpotReport, SimError> {
    estimate_tpot_series(&report.unique_miss_series(), io, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{StepRecord, TraceHeader};

    fn seq_trace(n: usize, k: usize, segments: &[&[&[usize]]]) -> RoutingTrace {
        let header = TraceHeader {
            n_moe_layers: 1,
            n_routed_experts: n,
            top_k: k,
            batch_size: 1,
            has_probs: false,
        };
        let mut records = Vec::new();
        for (s, sets) in segments.iter().enumerate() {
            for (t, set) in sets.iter().enumerate() {
                records.push(StepRecord {
                    segment: s,
                    step: t,
                    layer: 0,
                    batch: 0,
                    topk: set.to_vec(),
                    probs: None,
                });
            }
        }
        RoutingTrace::new(header, records).unwrap()
    }

    #[test]
    fn hand_simulated_lru() {
        let trace = seq_trace(4, 2, &[&[&[0, 1], &[1, 2], &[0, 1]]]);
        let r = simulate(&trace, &CacheConfig::new(2, Policy::Lru)).unwrap();
        assert_eq!(r.all.unique_misses, 4);
        assert_eq!(r.all.unique_hits, 2);
        assert_eq!(r.uhr, 2.0 / 6.0);
        let steps: Vec<u64> = r.steps.iter().map(|s| s.unique_misses).collect();
        assert_eq!(steps, vec![2, 1, 1]);
    }

    #[test]
    fn pure_reuse_only_misses_first_step() {
        let set: &[usize] = &[3, 1, 4];
        let seg: Vec<&[usize]> = vec![set; 10];
        let trace = seq_trace(8, 3, &[&seg, &seg]);
        for policy in [Policy::Lru, Policy::Lfu, Policy::Fifo, Policy::Belady] {
            let r = simulate(&trace, &CacheConfig::new(3, policy)).unwrap();
            assert_eq!(r.all.unique_misses, 6);
            assert!((r.uhr - (1.0 - 3.0 / 30.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn full_capacity_sees_only_compulsory_misses() {
        let trace = seq_trace(6, 2, &[&[&[0, 1], &[2, 3], &[0, 4], &[1, 2]], &[&[5, 0], &[0, 5]]]);
        for policy in [Policy::Lru, Policy::Lfu, Policy::Fifo, Policy::Belady] {
            let r = simulate(&trace, &CacheConfig::new(6, policy)).unwrap();
            // distinct experts per segment: {0,1,2,3,4} and {0,5}
            assert_eq!(r.all.unique_misses, 5 + 2);
        }
    }

    #[test]
    fn next_use_table() {
        let a: &[usize] = &[0, 1];
        let b: &[usize] = &[2, 3];
        let trace = seq_trace(4, 2, &[&[a, b, b, b, b, a], &[a]]);
        let tab = belady_next_use(&trace, 0);
        assert_eq!(tab.next_use(0, 0), Some(5));
        assert_eq!(tab.next_use(5, 0), Some(NEVER));
        assert_eq!(tab.next_use(6, 0), Some(NEVER));
        assert_eq!(tab.next_use(1, 2), Some(2));
        assert_eq!(tab.next_use(1, 0), None);
        let uncut = NextUseTable::build(&trace, 0, false);
        assert_eq!(uncut.next_use(5, 0), Some(6));
    }

    #[test]
    fn reroute_examples() {
        let p = [0.4, 0.3, 0.2, 0.1];
        assert_eq!(reroute_topk(&p, &[3], 0.0, 2), topk(&p, 2).unwrap());
        assert_eq!(reroute_topk(&p, &[3], 10.0, 2), vec![3, 0]);
        for beta in [0.0, 0.5, 3.0, 100.0] {
            let mut s = reroute_topk(&p, &[1], beta, 2);
            s.sort_unstable();
            assert_eq!(s, vec![0, 1]);
        }
    }

    #[test]
    fn reroute_needs_probs() {
        let trace = seq_trace(4, 2, &[&[&[0, 1]]]);
        let cfg = CacheConfig {
            reroute_beta: Some(1.0),
            ..CacheConfig::new(2, Policy::Lru)
        };
        assert_eq!(simulate(&trace, &cfg).unwrap_err(), SimError::RerouteWithoutProbs);
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[5.0], 0.5).unwrap(), 5.0);
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 2.0);
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&s, 0.99).unwrap(), 99.0);
        assert_eq!(percentile(&s, 0.95).unwrap(), 95.0);
        assert_eq!(percentile(&s, 1.0).unwrap(), 100.0);
        assert_eq!(percentile(&[], 0.5).unwrap_err(), SimError::EmptySeries);
    }

    #[test]
    fn tpot_examples() {
        let io = IoModel {
            expert_bytes: 1e6,
            bandwidth_gbps: 4.0,
            compute_ms: 30.0,
        };
        let r = estimate_tpot_series(&[0.0, 10.0], &io, 1).unwrap();
        assert_eq!(r.tpot_ms[0], 30.0);
        assert!((r.io_ms[1] - 2.5).abs() < 1e-12);
        assert!((r.tpot_ms[1] - 32.5).abs() < 1e-12);
        let fast = estimate_tpot_series(&[0.0, 10.0], &IoModel { bandwidth_gbps: 8.0, ..io }, 1).unwrap();
        assert!((fast.io_ms[1] - 1.25).abs() < 1e-12);
        let bad = IoModel { bandwidth_gbps: 0.0, ..io };
        assert!(estimate_tpot_series(&[1.0], &bad, 1).is_err());
    }
}
