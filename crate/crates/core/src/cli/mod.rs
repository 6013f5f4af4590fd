//! `remoe-lab` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable or invalid
//! input), 3 a checked property failed.

pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bounds::{self, FaultKind, FaultScenario};
use crate::cache::{self, CacheConfig, IoModel, Policy};
use crate::gate;
use crate::metrics;
use crate::objective::{self, ExperimentConfig, SweepConfig};
use crate::trace::{self, RoutingTrace, SynthConfig};
use output::{InputFile, RunManifest, Tagged};

#[derive(Debug, Parser)]
#[command(name = "remoe-lab", version, about = "Expert-routing locality lab: traces, cache simulation, bounds and router training")]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "REMOE_LAB_THREADS")]
    threads: Option<usize>,
    /// Manifest file to append to (default: manifest.jsonl next to the first output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Do not write a manifest entry.
    #[arg(long, global = true)]
    no_manifest: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic routing trace.
    Synth(SynthArgs),
    /// Check a trace file against every trace invariant.
    Validate(ValidateArgs),
    /// Locality and concentration metrics of a trace.
    Metrics(MetricsArgs),
    /// Replay a trace through per-layer expert caches.
    Simulate(SimulateArgs),
    /// Check the overlap-to-fetch bounds.
    BoundCheck(BoundCheckArgs),
    /// Top-K stability and Pinsker campaigns.
    Router(RouterArgs),
    /// Fine-tune a toy gate with the locality objective.
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Train once per point of a weight grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    experts: usize,
    #[arg(long, default_value_t = 6)]
    top_k: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    segments: usize,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    /// Probability of keeping each expert of the previous step.
    #[arg(long, default_value_t = 0.5)]
    stickiness: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Emit routing distributions.
    #[arg(long)]
    probs: bool,
    #[arg(long, default_value_t = 0.5)]
    concentration: f64,
    #[arg(long)]
    independent_batches: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Add per-layer rows.
    #[arg(long)]
    per_layer: bool,
    /// `.json` for a nested report, anything else for CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    Interference,
    Prefetch,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    capacity: usize,
    #[arg(long, default_value = "lru")]
    policy: Policy,
    /// Clear the caches at every segment start (the default).
    #[arg(long, conflicts_with = "no_reset")]
    reset_each_segment: bool,
    /// Keep cache state across segments.
    #[arg(long)]
    no_reset: bool,
    /// Reroute with this residency bonus.
    #[arg(long)]
    beta: Option<f64>,
    /// Inject a cache fault between steps.
    #[arg(long)]
    fault: Option<FaultArg>,
    #[arg(long, default_value_t = 1)]
    fault_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, requires_all = ["bandwidth_gbps", "compute_ms"])]
    expert_bytes: Option<f64>,
    #[arg(long, requires_all = ["expert_bytes", "compute_ms"])]
    bandwidth_gbps: Option<f64>,
    #[arg(long, requires_all = ["expert_bytes", "bandwidth_gbps"])]
    compute_ms: Option<f64>,
    /// `.json` for a nested report, anything else for CSV.
    #[arg(long)]
    out: PathBuf,
    /// Per-step series CSV (default: `<out stem>.steps.csv` for CSV output).
    #[arg(long)]
    steps_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BoundCheckArgs {
    #[arg(long, conflicts_with_all = ["campaign", "counterexamples"])]
    trace: Option<PathBuf>,
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long, default_value = "lru")]
    policy: Policy,
    /// Also check the working-set bound (LRU only).
    #[arg(long)]
    working_set: bool,
    /// Run N randomized traces instead of a trace file.
    #[arg(long, conflicts_with = "counterexamples")]
    campaign: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Demonstrate the documented failure modes.
    #[arg(long)]
    counterexamples: bool,
    /// JSON report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum RouterCheck {
    Stability,
    Pinsker,
}

#[derive(Debug, Args)]
struct RouterArgs {
    #[arg(long)]
    check: RouterCheck,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Experiment JSON (data, n_experts, init_scale, weights, train).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed of the initial gate.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_theta: PathBuf,
    #[arg(long)]
    log: PathBuf,
    /// JSON summary of initial and final routing statistics.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Sweep JSON: `base` experiment plus `grid` of weight values.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Check(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Check(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Tracks the manifest entry and files written by one invocation.
struct Ctx {
    manifest: Option<RunManifest>,
    outputs: Vec<PathBuf>,
}

impl Ctx {
    fn begin<C: Serialize>(&mut self, name: &str, config: &C, inputs: Vec<InputFile>, seed: Option<u64>) -> String {
        let cfg = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        let m = RunManifest::new(name, cfg, inputs, seed);
        let id = m.run_id.clone();
        self.manifest = Some(m);
        id
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        output::write_atomic(path, bytes).map_err(io_err(path))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<(), CliError> {
        let bytes = output::json_bytes(value).map_err(data)?;
        self.write(path, &bytes)
    }

    fn write_csv<T: Serialize>(&mut self, path: &Path, rows: &[T]) -> Result<(), CliError> {
        let bytes = output::csv_bytes(rows).map_err(data)?;
        self.write(path, &bytes)
    }

    /// Write JSON to `path`, or print it when no path is given.
    fn emit_json<T: Serialize>(&mut self, path: Option<&Path>, value: &T) -> Result<(), CliError> {
        match path {
            Some(p) => self.write_json(p, value),
            None => {
                let bytes = output::json_bytes(value).map_err(data)?;
                print!("{}", String::from_utf8_lossy(&bytes));
                Ok(())
            }
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn load_trace(path: &Path) -> Result<(InputFile, RoutingTrace), CliError> {
    let (input, bytes) = InputFile::read(path).map_err(io_err(path))?;
    let t = trace::parse_trace(&bytes[..]).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((input, t))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(InputFile, T), CliError> {
    let (input, bytes) = InputFile::read(path).map_err(io_err(path))?;
    let v = serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((input, v))
}

fn objective_err(e: objective::ObjectiveError) -> CliError {
    use objective::ObjectiveError as E;
    match e {
        E::Diverged { .. } => CliError::Check(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn cmd_synth(a: &SynthArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let cfg = SynthConfig {
        n_moe_layers: a.layers,
        n_routed_experts: a.experts,
        top_k: a.top_k,
        batch_size: a.batch,
        n_segments: a.segments,
        steps_per_segment: a.steps,
        stickiness: a.stickiness,
        seed: a.seed,
        emit_probs: a.probs,
        concentration: a.concentration,
        independent_batches: a.independent_batches,
    };
    ctx.begin("synth", &cfg, vec![], Some(a.seed));
    let t = trace::synth_trace(&cfg).map_err(usage)?;
    let mut buf = Vec::new();
    trace::write_trace(&t, &mut buf).map_err(data)?;
    ctx.write(&a.out, &buf)?;
    println!("wrote {} records to {}", t.records().len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ValidationReport {
    valid: bool,
    records: usize,
    error: Option<String>,
    violations: Vec<trace::Violation>,
}

fn cmd_validate(a: &ValidateArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let (input, bytes) = InputFile::read(&a.trace).map_err(io_err(&a.trace))?;
    let run_id = ctx.begin("validate", &serde_json::json!({}), vec![input], None);
    let report = match trace::read_records(&bytes[..]) {
        Ok((header, records)) => {
            let violations = trace::validate_records(&header, &records);
            ValidationReport {
                valid: violations.is_empty(),
                records: records.len(),
                error: None,
                violations,
            }
        }
        Err(e) => ValidationReport {
            valid: false,
            records: 0,
            error: Some(e.to_string()),
            violations: vec![],
        },
    };
    if let Some(out) = &a.out {
        ctx.write_json(out, &Tagged { run_id: &run_id, body: &report })?;
    }
    if let Some(e) = &report.error {
        println!("invalid: {e}");
    }
    for v in &report.violations {
        println!("{v}");
    }
    if report.valid {
        println!("valid: {} records", report.records);
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{}: {} violation(s)",
            a.trace.display(),
            report.violations.len().max(1)
        )))
    }
}

#[derive(Serialize)]
struct MetricRow {
    metric: &'static str,
    layer: String,
    value: f64,
}

fn cmd_metrics(a: &MetricsArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let (input, t) = load_trace(&a.trace)?;
    let run_id = ctx.begin("metrics", &serde_json::json!({ "per_layer": a.per_layer }), vec![input], None);
    let r = metrics::metrics_report(&t).map_err(data)?;
    if is_json(&a.out) {
        return ctx.write_json(&a.out, &Tagged { run_id: &run_id, body: &r });
    }
    let all = |metric, value| MetricRow {
        metric,
        layer: "all".into(),
        value,
    };
    let mut rows = vec![all("eor", r.eor), all("eor_pooled", r.eor_pooled)];
    if let Some(h) = r.entropy_norm {
        rows.push(all("entropy_norm", h));
    }
    rows.push(all("load_cv", r.load_cv));
    rows.push(all("unique_experts", r.unique_experts_per_sequence));
    if a.per_layer {
        for m in &r.layers {
            let row = |metric, value| MetricRow {
                metric,
                layer: m.layer.to_string(),
                value,
            };
            rows.push(row("eor", m.eor));
            if let Some(h) = m.entropy_norm {
                rows.push(row("entropy_norm", h));
            }
            rows.push(row("load_cv", m.load_cv));
            rows.push(row("unique_experts", m.unique_experts_per_sequence));
        }
    }
    ctx.write_csv(&a.out, &rows)
}

#[derive(Serialize)]
struct SimRow {
    layer: String,
    #[serde(rename = "uHR")]
    uhr: f64,
    #[serde(rename = "tHR")]
    thr: f64,
    #[serde(rename = "uMiss")]
    umiss: u64,
    #[serde(rename = "tMiss")]
    tmiss: u64,
}

#[derive(Serialize)]
struct StepRow {
    segment: usize,
    step: usize,
    unique_misses: u64,
    token_hits: u64,
    token_total: u64,
    io_ms: Option<f64>,
    tpot_ms: Option<f64>,
}

#[derive(Serialize)]
struct SimOutput<'a> {
    config: &'a CacheConfig,
    io_model: Option<IoModel>,
    report: &'a cache::SimReport,
    tpot: Option<cache::TpotReport>,
}

fn steps_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    let mut name = stem;
    name.push(".steps.csv");
    out.with_file_name(name)
}

fn cmd_simulate(a: &SimulateArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let (input, t) = load_trace(&a.trace)?;
    let cfg = CacheConfig {
        capacity: a.capacity,
        policy: a.policy,
        reset_each_segment: !a.no_reset,
        reroute_beta: a.beta,
        scenario: a.fault.map(|f| FaultScenario {
            kind: match f {
                FaultArg::Interference => FaultKind::Interference,
                FaultArg::Prefetch => FaultKind::Prefetch,
            },
            n: a.fault_n,
            seed: a.seed,
        }),
    };
    let io = match (a.expert_bytes, a.bandwidth_gbps, a.compute_ms) {
        (Some(expert_bytes), Some(bandwidth_gbps), Some(compute_ms)) => Some(IoModel {
            expert_bytes,
            bandwidth_gbps,
            compute_ms,
        }),
        _ => None,
    };
    let run_id = ctx.begin(
        "simulate",
        &serde_json::json!({ "cache": &cfg, "io_model": io }),
        vec![input],
        Some(a.seed),
    );
    let report = cache::simulate(&t, &cfg).map_err(usage)?;
    let tpot = io
        .as_ref()
        .map(|m| cache::estimate_tpot(&report, m, t.header.batch_size))
        .transpose()
        .map_err(usage)?;

    if is_json(&a.out) {
        let body = SimOutput {
            config: &cfg,
            io_model: io,
            report: &report,
            tpot: tpot.clone(),
        };
        ctx.write_json(&a.out, &Tagged { run_id: &run_id, body })?;
    } else {
        let mut rows: Vec<SimRow> = report
            .layers
            .iter()
            .map(|l| SimRow {
                layer: l.layer.to_string(),
                uhr: l.uhr,
                thr: l.thr,
                umiss: l.totals.unique_misses,
                tmiss: l.totals.token_misses,
            })
            .collect();
        rows.push(SimRow {
            layer: "all".into(),
            uhr: report.uhr,
            thr: report.thr,
            umiss: report.all.unique_misses,
            tmiss: report.all.token_misses,
        });
        ctx.write_csv(&a.out, &rows)?;
    }
    let steps_out = a.steps_out.clone().or_else(|| (!is_json(&a.out)).then(|| steps_path(&a.out)));
    if let Some(path) = steps_out {
        let rows: Vec<StepRow> = report
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| StepRow {
                segment: s.segment,
                step: s.step,
                unique_misses: s.unique_misses,
                token_hits: s.token_hits,
                token_total: s.token_total,
                io_ms: tpot.as_ref().map(|x| x.io_ms[i]),
                tpot_ms: tpot.as_ref().map(|x| x.tpot_ms[i]),
            })
            .collect();
        ctx.write_csv(&path, &rows)?;
    }
    println!(
        "uHR {:.6} tHR {:.6} uMiss {} over {} steps",
        report.uhr,
        report.thr,
        report.all.unique_misses,
        report.steps.len()
    );
    Ok(())
}

fn bound_err(e: bounds::BoundError) -> CliError {
    usage(e)
}

fn cmd_bound_check(a: &BoundCheckArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    if a.counterexamples {
        let run_id = ctx.begin("bound-check", &serde_json::json!({ "counterexamples": true }), vec![], None);
        let r = bounds::run_counterexamples().map_err(bound_err)?;
        for s in &r.scenarios {
            println!(
                "{}: {} violation(s), breaks {:?} (C={}, K={})",
                s.name, s.violations, s.broken, s.capacity, s.top_k
            );
        }
        ctx.emit_json(a.out.as_deref(), &Tagged { run_id: &run_id, body: &r })?;
        return if r.all_violate() {
            Ok(())
        } else {
            Err(CliError::Check("a counterexample produced no violation".into()))
        };
    }
    if let Some(n) = a.campaign {
        let run_id = ctx.begin(
            "bound-check",
            &serde_json::json!({ "campaign": n, "capacity": a.capacity }),
            vec![],
            Some(a.seed),
        );
        let r = bounds::bound_campaign(n, a.seed, a.capacity).map_err(bound_err)?;
        println!(
            "{} traces, {} runs, {} steps: {} step, {} average, {} working-set violations",
            r.traces, r.runs, r.steps_checked, r.step_violations, r.avg_violations, r.ws_violations
        );
        ctx.emit_json(a.out.as_deref(), &Tagged { run_id: &run_id, body: &r })?;
        return if r.clean() {
            Ok(())
        } else {
            Err(CliError::Check("bound violated".into()))
        };
    }
    let (Some(path), Some(capacity)) = (&a.trace, a.capacity) else {
        return Err(CliError::Usage(
            "bound-check needs --trace and --capacity, --campaign N, or --counterexamples".into(),
        ));
    };
    if a.working_set && a.policy != Policy::Lru {
        return Err(CliError::Usage("the working-set bound is defined for lru only".into()));
    }
    let (input, t) = load_trace(path)?;
    let run_id = ctx.begin(
        "bound-check",
        &serde_json::json!({ "capacity": capacity, "policy": a.policy, "working_set": a.working_set }),
        vec![input],
        None,
    );
    let r = if a.working_set {
        bounds::check_working_set_bound(&t, capacity)
    } else {
        bounds::check_step_bound(&t, &CacheConfig::new(capacity, a.policy))
    }
    .map_err(bound_err)?;
    println!(
        "{} steps: {} step, {} average, {} working-set violations",
        r.steps_checked, r.step_violations, r.avg_violations, r.ws_violations
    );
    ctx.emit_json(a.out.as_deref(), &Tagged { run_id: &run_id, body: &r })?;
    if r.violations() == 0 {
        Ok(())
    } else {
        Err(CliError::Check("bound violated".into()))
    }
}

#[derive(Serialize)]
struct RouterOutput {
    check: RouterCheck,
    #[serde(flatten)]
    summary: gate::CampaignSummary,
}

fn cmd_router(a: &RouterArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let run_id = ctx.begin(
        "router",
        &serde_json::json!({ "check": a.check, "trials": a.trials }),
        vec![],
        Some(a.seed),
    );
    let summary = match a.check {
        RouterCheck::Stability => gate::stability_campaign(a.trials, a.seed),
        RouterCheck::Pinsker => gate::pinsker_campaign(a.trials, a.seed),
    };
    println!(
        "{:?}: {} draws, {} checked, {} failures",
        a.check, summary.draws, summary.checked, summary.failures
    );
    let body = RouterOutput { check: a.check, summary };
    ctx.emit_json(a.out.as_deref(), &Tagged { run_id: &run_id, body })?;
    if summary.failures == 0 {
        Ok(())
    } else {
        Err(CliError::Check(format!("{} failures", summary.failures)))
    }
}

#[derive(Serialize)]
struct TrainSummary {
    initial: objective::EvalSummary,
    last: objective::EvalSummary,
    eor_gain: f64,
}

fn cmd_train(a: &TrainArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let (inputs, mut cfg) = match &a.config {
        Some(p) => {
            let (input, cfg) = load_json::<ExperimentConfig>(p)?;
            (vec![input], cfg)
        }
        None => (vec![], ExperimentConfig::default()),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let run_id = ctx.begin("train", &cfg, inputs, Some(cfg.train.seed));
    let run = objective::run_experiment(&cfg).map_err(objective_err)?;
    gate::save_matrix(&a.out_theta, &run.theta).map_err(io_err(&a.out_theta))?;
    ctx.outputs.push(a.out_theta.clone());
    ctx.outputs.push(gate::sidecar_path(&a.out_theta));
    ctx.write_csv(&a.log, &run.log)?;
    let summary = TrainSummary {
        initial: run.initial,
        last: run.last,
        eor_gain: run.eor_gain(),
    };
    if let Some(out) = &a.out {
        ctx.write_json(out, &Tagged { run_id: &run_id, body: &summary })?;
    }
    println!(
        "EOR {:.4} -> {:.4} ({:+.1}%), trust_kl {:.5}",
        run.initial.eor,
        run.last.eor,
        100.0 * summary.eor_gain,
        run.last.trust_kl
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let run_id = ctx.begin(
        "gradcheck",
        &serde_json::json!({ "instances": a.instances, "step": a.step, "tol": a.tol }),
        vec![],
        Some(a.seed),
    );
    if a.instances == 0 || !(a.step > 0.0) {
        return Err(CliError::Usage("need --instances >= 1 and --step > 0".into()));
    }
    let r = objective::gradcheck(a.instances, a.seed, a.step).map_err(objective_err)?;
    for (name, e) in objective::TERM_NAMES.iter().zip(r.max_rel_error) {
        println!("{name:>6}: {e:.3e}");
    }
    println!("max relative error: {:.3e}", r.worst);
    if let Some(out) = &a.out {
        ctx.write_json(out, &Tagged { run_id: &run_id, body: &r })?;
    }
    if r.passes(a.tol) {
        Ok(())
    } else {
        Err(CliError::Check(format!("max relative error {:.3e} >= {:e}", r.worst, a.tol)))
    }
}

fn cmd_sweep(a: &SweepArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let (input, cfg) = load_json::<SweepConfig>(&a.config)?;
    ctx.begin("sweep", &cfg, vec![input], Some(cfg.base.train.seed));
    let rows = objective::sweep(&cfg).map_err(|e| match e {
        objective::ObjectiveError::EmptyGrid => usage(e),
        other => objective_err(other),
    })?;
    ctx.write_csv(&a.out, &rows)?;
    println!("{} grid points written to {}", rows.len(), a.out.display());
    Ok(())
}

fn run_command(cli: &Cli, ctx: &mut Ctx) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, ctx),
        Command::Validate(a) => cmd_validate(a, ctx),
        Command::Metrics(a) => cmd_metrics(a, ctx),
        Command::Simulate(a) => cmd_simulate(a, ctx),
        Command::BoundCheck(a) => cmd_bound_check(a, ctx),
        Command::Router(a) => cmd_router(a, ctx),
        Command::Train(a) => cmd_train(a, ctx),
        Command::Gradcheck(a) => cmd_gradcheck(a, ctx),
        Command::Sweep(a) => cmd_sweep(a, ctx),
    }
}

fn finish_manifest(cli: &Cli, ctx: Ctx, started: Instant) -> Result<(), CliError> {
    let Some(mut m) = ctx.manifest else {
        return Ok(());
    };
    if cli.no_manifest || ctx.outputs.is_empty() {
        return Ok(());
    }
    let path = cli.manifest.clone().unwrap_or_else(|| {
        let dir = ctx.outputs[0].parent().map(Path::to_path_buf).unwrap_or_default();
        dir.join("manifest.jsonl")
    });
    m.outputs = ctx.outputs;
    m.duration_ms = started.elapsed().as_secs_f64() * 1e3;
    m.append_to(&path).map_err(io_err(&path))
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let started = Instant::now();
    let mut ctx = Ctx {
        manifest: None,
        outputs: Vec::new(),
    };
    let body = |ctx: &mut Ctx| run_command(&cli, ctx);
    let result = match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| body(&mut ctx)),
            Err(e) => Err(usage(e)),
        },
        None => body(&mut ctx),
    };
    let manifest = finish_manifest(&cli, ctx, started);
    match result.and(manifest) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}
