//! Acceptance suite: one PASS/FAIL line per criterion, thresholds pinned.
//! Runs as a plain binary (no libtest harness) so the lines always show.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use remoe_core::bounds::{
    bound_campaign, check_step_bound, check_working_set_bound, run_counterexamples, CampaignReport,
};
use remoe_core::cache::{estimate_tpot_series, simulate, CacheConfig, IoModel, Policy};
use remoe_core::gate::{pinsker_campaign, stability_campaign};
use remoe_core::objective::{gradcheck, mc_campaign, run_experiment, ExperimentConfig, LossWeights, TERM_NAMES};
use remoe_core::trace::{synth_trace, RoutingTrace, StepRecord, SynthConfig, TraceHeader};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, took: Duration) -> bool {
    took < limit
}

fn index_trace(n: usize, k: usize, sets: &[Vec<usize>]) -> RoutingTrace {
    let header = TraceHeader {
        n_moe_layers: 1,
        n_routed_experts: n,
        top_k: k,
        batch_size: 1,
        has_probs: false,
    };
    let records = sets
        .iter()
        .enumerate()
        .map(|(t, s)| StepRecord {
            segment: 0,
            step: t,
            layer: 0,
            batch: 0,
            topk: s.clone(),
            probs: None,
        })
        .collect();
    RoutingTrace::new(header, records).unwrap()
}

static CAMPAIGN: OnceLock<(CampaignReport, Duration)> = OnceLock::new();

fn campaign() -> &'static (CampaignReport, Duration) {
    CAMPAIGN.get_or_init(|| {
        let start = Instant::now();
        let r = bound_campaign(1000, 20_240_601, None).expect("campaign preconditions hold");
        (r, start.elapsed())
    })
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let r = gradcheck(20, 0, 1e-5).expect("instances are valid");
    let took = start.elapsed();
    let terms: Vec<String> = TERM_NAMES
        .iter()
        .zip(r.max_rel_error)
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    verdict(
        r.instances >= 20 && r.passes(1e-5) && within(Duration::from_secs(60), took),
        format!("{} instances, max rel error per term: {}; {took:.1?}", r.instances, terms.join(", ")),
    )
}

fn bound_campaign_and_tightness() -> Verdict {
    let (r, took) = campaign();
    // disjoint consecutive sets at C = K: every step fetches exactly K
    let sets: Vec<Vec<usize>> = (0..8).map(|t| (0..3).map(|j| (t % 4) * 3 + j).collect()).collect();
    let tight = check_step_bound(&index_trace(12, 3, &sets), &CacheConfig::new(3, Policy::Lru)).unwrap();
    let seq = &tight.sequences[0];
    let equal = seq.steps.iter().all(|s| s.n_fetch == s.bound && s.bound == 3) && seq.avg_fetch == seq.avg_bound;
    verdict(
        r.traces >= 1000 && r.step_violations == 0 && r.avg_violations == 0 && equal && within(Duration::from_secs(120), *took),
        format!(
            "{} traces, {} runs, {} steps: {} step / {} average violations; disjoint case fetch {} = bound {}; {took:.1?}",
            r.traces, r.runs, r.steps_checked, r.step_violations, r.avg_violations, seq.avg_fetch, seq.avg_bound
        ),
    )
}

fn counterexamples() -> Verdict {
    let r = run_counterexamples().unwrap();
    let each: Vec<String> = r.scenarios.iter().map(|s| format!("{} {}", s.name, s.violations)).collect();
    verdict(
        r.scenarios.len() == 3 && r.all_violate(),
        format!("violations: {}", each.join(", ")),
    )
}

fn working_set_bound() -> Verdict {
    let (r, _) = campaign();
    let periodic: Vec<Vec<usize>> = (0..12).map(|t| if t % 2 == 0 { vec![0, 1] } else { vec![2, 3] }).collect();
    let p = check_working_set_bound(&index_trace(8, 2, &periodic), 4).unwrap();
    verdict(
        r.ws_runs >= 1000 && r.ws_violations == 0 && p.ws_violations == 0 && p.ws_tighter_steps >= 1,
        format!(
            "{} runs at C=2K, {} violations; periodic A,B trace at C=4: tighter on {} steps",
            r.ws_runs, r.ws_violations, p.ws_tighter_steps
        ),
    )
}

fn cache_oracle() -> Verdict {
    let mut runs = 0;
    let mut first_error = None;
    for seed in 0..100 {
        let trace = common::tiny_trace(seed, 8, 20);
        for cap in 1..=trace.header.n_routed_experts {
            for p in [Policy::Lru, Policy::Lfu, Policy::Fifo, Policy::Belady] {
                runs += 1;
                if let Err(e) = common::check_against_reference(&trace, cap, p) {
                    first_error.get_or_insert(e);
                }
            }
        }
    }
    match first_error {
        None => verdict(true, format!("100 traces, {runs} (capacity, policy) runs identical")),
        Some(e) => verdict(false, e),
    }
}

fn lru_monotone() -> Verdict {
    let caps = [4, 6, 8, 12];
    let mut traces = 0;
    let mut bad = Vec::new();
    let mut mean = [0.0; 4];
    for seed in 0..60u64 {
        let cfg = SynthConfig {
            n_moe_layers: 1 + (seed % 2) as usize,
            batch_size: 1 + (seed % 3) as usize,
            n_segments: 1 + (seed % 4) as usize,
            stickiness: [0.2, 0.5, 0.8][(seed % 3) as usize],
            seed,
            ..Default::default()
        };
        let trace = synth_trace(&cfg).unwrap();
        let uhr: Vec<f64> = caps
            .iter()
            .map(|&c| simulate(&trace, &CacheConfig::new(c, Policy::Lru)).unwrap().uhr)
            .collect();
        if uhr.windows(2).any(|w| w[1] < w[0]) {
            bad.push(seed);
        }
        for (m, u) in mean.iter_mut().zip(&uhr) {
            *m += u / 60.0;
        }
        traces += 1;
    }
    verdict(
        bad.is_empty(),
        format!(
            "{traces} traces, mean uHR over C=4,6,8,12: {:.3} {:.3} {:.3} {:.3}; non-monotone: {bad:?}",
            mean[0], mean[1], mean[2], mean[3]
        ),
    )
}

fn monte_carlo() -> Verdict {
    let r = mc_campaign(100, 100_000, 7).unwrap();
    verdict(
        r.instances >= 100 && r.pass_rate() >= 0.99,
        format!("{} of {} instances within 4 standard errors, max |z| {:.2}", r.passed, r.instances, r.max_z),
    )
}

fn stability_and_pinsker() -> Verdict {
    let s = stability_campaign(100_000, 11);
    let p = pinsker_campaign(10_000, 12);
    verdict(
        s.checked >= 100_000 && s.failures == 0 && p.checked >= 10_000 && p.failures == 0,
        format!(
            "stability: {} qualifying of {} draws, {} Top-K changes; pinsker: {} pairs, {} failures",
            s.checked, s.draws, s.failures, p.checked, p.failures
        ),
    )
}

fn training_effect() -> Verdict {
    let start = Instant::now();
    let base = ExperimentConfig::default();
    let full = run_experiment(&base).unwrap();
    let no_reuse = run_experiment(&ExperimentConfig {
        weights: LossWeights {
            lambda_reuse: 0.0,
            ..base.weights.clone()
        },
        ..base.clone()
    })
    .unwrap();
    let no_trust = run_experiment(&ExperimentConfig {
        weights: LossWeights {
            lambda_kl: 0.0,
            ..base.weights.clone()
        },
        ..base.clone()
    })
    .unwrap();
    let took = start.elapsed();
    verdict(
        full.eor_gain() >= 0.10
            && no_reuse.eor_gain() < full.eor_gain()
            && no_trust.last.trust_kl > full.last.trust_kl
            && within(Duration::from_secs(300), took),
        format!(
            "EOR {:.4} -> {:.4} ({:+.1}%); w/o reuse {:+.1}%; trust_kl full {:.4} vs w/o trust {:.4}; {took:.1?}",
            full.initial.eor,
            full.last.eor,
            100.0 * full.eor_gain(),
            100.0 * no_reuse.eor_gain(),
            full.last.trust_kl,
            no_trust.last.trust_kl
        ),
    )
}

fn rerouting() -> Verdict {
    let mut uhr = [0.0; 3];
    let mut bitwise = true;
    let mut ordered = true;
    for seed in 0..5 {
        let cfg = SynthConfig {
            emit_probs: true,
            n_segments: 4,
            steps_per_segment: 64,
            seed,
            ..Default::default()
        };
        let trace = synth_trace(&cfg).unwrap();
        let plain = simulate(&trace, &CacheConfig::new(4, Policy::Lru)).unwrap();
        let mut per = [0.0; 3];
        for (i, beta) in [0.0, 1.0, 4.0].into_iter().enumerate() {
            let mut c = CacheConfig::new(4, Policy::Lru);
            c.reroute_beta = Some(beta);
            let r = simulate(&trace, &c).unwrap();
            if beta == 0.0 {
                bitwise &= r.cache_view() == plain.cache_view();
            }
            per[i] = r.uhr;
            uhr[i] += r.uhr / 5.0;
        }
        ordered &= per[1] > per[0] && per[2] > per[1];
    }
    verdict(
        ordered && bitwise,
        format!(
            "5 traces at C=4, mean uHR beta 0/1/4: {:.4} / {:.4} / {:.4}; beta=0 identical to plain: {bitwise}",
            uhr[0], uhr[1], uhr[2]
        ),
    )
}

fn tpot_exactness() -> Verdict {
    let io = IoModel {
        expert_bytes: 50_331_648.0,
        bandwidth_gbps: 16.0,
        compute_ms: 12.5,
    };
    let misses = [0.0, 3.0, 1.0, 12.0, 7.0];
    let r = estimate_tpot_series(&misses, &io, 4).unwrap();
    let mut worst: f64 = 0.0;
    for (i, m) in misses.iter().enumerate() {
        // bytes / (bytes per ms)
        let io_ms = m * 50_331_648.0 / 16e6;
        let want = 12.5 + io_ms / 4.0;
        worst = worst.max((r.io_ms[i] - io_ms).abs()).max((r.tpot_ms[i] - want).abs());
    }
    let zero = estimate_tpot_series(&[0.0; 6], &io, 3).unwrap();
    let exact_zero = zero.tpot_ms.iter().all(|&x| x == 12.5) && zero.tpot_percentiles.p99 == 12.5;
    // nearest rank over 5 sorted values: p50 is the 3rd, p95 and p99 the 5th
    let sorted_io = [0.0, 1.0, 3.0, 7.0, 12.0].map(|m| m * 50_331_648.0 / 16e6);
    let pct = (r.io_percentiles.p50 - sorted_io[2]).abs().max((r.io_percentiles.p99 - sorted_io[4]).abs());
    verdict(
        worst < 1e-12 && pct < 1e-12 && exact_zero,
        format!("max deviation {worst:.1e}, percentile deviation {pct:.1e}, zero-miss series exact: {exact_zero}"),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    match common::determinism_check(dir.path()) {
        Ok(n) => verdict(true, format!("{n} output files byte-identical across two runs of every subcommand")),
        Err(e) => verdict(false, e),
    }
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 12] = [
        ("gradient oracle", gradient_oracle),
        ("fetch bound campaign", bound_campaign_and_tightness),
        ("counterexamples", counterexamples),
        ("working-set bound", working_set_bound),
        ("cache reference equivalence", cache_oracle),
        ("LRU capacity monotonicity", lru_monotone),
        ("reuse mass Monte Carlo", monte_carlo),
        ("Top-K stability and Pinsker", stability_and_pinsker),
        ("toy training effect", training_effect),
        ("rerouting direction", rerouting),
        ("TPOT exactness", tpot_exactness),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("{tag} {:>2} {name}: {}", i + 1, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
