//! Python bindings. Nested reports come back as plain dicts and lists.

use std::io::BufReader;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use remoe_core::bounds;
use remoe_core::cache::{self, CacheConfig, IoModel, Policy};
use remoe_core::gate::{self, Matrix};
use remoe_core::metrics;
use remoe_core::objective::{self, ExperimentConfig, HiddenSequence, LossWeights};
use remoe_core::trace::{self, SynthConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(Matrix::from_rows(&rows))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|i| m.row(i).to_vec()).collect()
}

fn weights(w: Option<&Bound<'_, PyAny>>) -> PyResult<LossWeights> {
    w.map_or_else(|| Ok(LossWeights::default()), from_py)
}

/// A validated routing trace.
#[pyclass(module = "remoe_lab", frozen)]
pub struct RoutingTrace {
    inner: trace::RoutingTrace,
}

#[pymethods]
impl RoutingTrace {
    /// Parse a JSONL trace file.
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let f = std::fs::File::open(&path).map_err(value_err)?;
        let inner = trace::parse_trace(BufReader::new(f)).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        let inner = trace::parse_trace(text.as_bytes()).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Synthetic trace; keyword arguments override the generator defaults.
    #[staticmethod]
    #[pyo3(signature = (**config))]
    fn synth(config: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut cfg = serde_json::to_value(SynthConfig::default()).map_err(value_err)?;
        if let Some(c) = config {
            let extra: serde_json::Map<String, serde_json::Value> = from_py(c.as_any())?;
            for (k, v) in extra {
                if cfg.get(&k).is_none() {
                    return Err(PyValueError::new_err(format!("unknown synth option {k:?}")));
                }
                cfg[k] = v;
            }
        }
        let cfg: SynthConfig = serde_json::from_value(cfg).map_err(value_err)?;
        let inner = trace::synth_trace(&cfg).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        trace::write_trace(&self.inner, &mut buf).map_err(value_err)?;
        String::from_utf8(buf).map_err(value_err)
    }

    #[getter]
    fn n_moe_layers(&self) -> usize {
        self.inner.header.n_moe_layers
    }

    #[getter]
    fn n_routed_experts(&self) -> usize {
        self.inner.header.n_routed_experts
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.inner.header.top_k
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.header.batch_size
    }

    #[getter]
    fn has_probs(&self) -> bool {
        self.inner.header.has_probs
    }

    #[getter]
    fn segment_lengths(&self) -> Vec<usize> {
        self.inner.segment_lengths().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.records().len()
    }

    /// Routed experts of one record.
    fn topk(&self, segment: usize, step: usize, layer: usize, batch: usize) -> PyResult<Vec<usize>> {
        let h = self.inner.header;
        if segment >= self.inner.n_segments()
            || step >= self.inner.segment_lengths()[segment]
            || layer >= h.n_moe_layers
            || batch >= h.batch_size
        {
            return Err(pyo3::exceptions::PyIndexError::new_err("record out of range"));
        }
        Ok(self.inner.record(segment, step, layer, batch).topk.clone())
    }

    fn __repr__(&self) -> String {
        let h = self.inner.header;
        format!(
            "RoutingTrace(layers={}, experts={}, top_k={}, batch={}, steps={})",
            h.n_moe_layers,
            h.n_routed_experts,
            h.top_k,
            h.batch_size,
            self.inner.total_steps()
        )
    }
}

/// Trace-level locality metrics.
#[pyfunction]
fn metrics_report<'py>(py: Python<'py>, trace: &RoutingTrace) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &metrics::metrics_report(&trace.inner).map_err(value_err)?)
}

#[pyfunction]
fn instantaneous_reuse(prev: Vec<usize>, cur: Vec<usize>, k: usize) -> PyResult<f64> {
    metrics::instantaneous_reuse(&prev, &cur, k).map_err(value_err)
}

fn cache_config(capacity: usize, policy: &str, reset: bool, beta: Option<f64>) -> PyResult<CacheConfig> {
    let policy: Policy = policy.parse().map_err(PyValueError::new_err)?;
    let mut cfg = CacheConfig::new(capacity, policy);
    cfg.reset_each_segment = reset;
    cfg.reroute_beta = beta;
    Ok(cfg)
}

/// Replay a trace through per-layer caches.
#[pyfunction]
#[pyo3(signature = (trace, capacity, policy = "lru", reset = true, beta = None))]
fn simulate<'py>(
    py: Python<'py>,
    trace: &RoutingTrace,
    capacity: usize,
    policy: &str,
    reset: bool,
    beta: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = cache_config(capacity, policy, reset, beta)?;
    let report = py.detach(|| cache::simulate(&trace.inner, &cfg)).map_err(value_err)?;
    to_py(py, &report)
}

/// Per-step I/O and per-token latency from unique miss counts.
#[pyfunction]
fn estimate_tpot<'py>(
    py: Python<'py>,
    unique_misses: Vec<f64>,
    expert_bytes: f64,
    bandwidth_gbps: f64,
    compute_ms: f64,
    batch: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let io = IoModel {
        expert_bytes,
        bandwidth_gbps,
        compute_ms,
    };
    to_py(py, &cache::estimate_tpot_series(&unique_misses, &io, batch).map_err(value_err)?)
}

#[pyfunction]
#[pyo3(signature = (trace, capacity, policy = "lru"))]
fn check_step_bound<'py>(
    py: Python<'py>,
    trace: &RoutingTrace,
    capacity: usize,
    policy: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = cache_config(capacity, policy, true, None)?;
    to_py(py, &bounds::check_step_bound(&trace.inner, &cfg).map_err(value_err)?)
}

#[pyfunction]
fn check_working_set_bound<'py>(py: Python<'py>, trace: &RoutingTrace, capacity: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &bounds::check_working_set_bound(&trace.inner, capacity).map_err(value_err)?)
}

#[pyfunction]
fn run_counterexamples(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &bounds::run_counterexamples().map_err(value_err)?)
}

#[pyfunction]
#[pyo3(signature = (n_traces, seed = 0))]
fn bound_campaign(py: Python<'_>, n_traces: usize, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    let r = py.detach(|| bounds::bound_campaign(n_traces, seed, None)).map_err(value_err)?;
    to_py(py, &r)
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    gate::softmax(&logits)
}

/// Indices of the `k` largest scores; ties go to the lowest index.
#[pyfunction]
fn topk(scores: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    gate::topk(&scores, k).map_err(value_err)
}

#[pyfunction]
fn gate_forward(h: Vec<f64>, theta: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    gate::gate_forward(&h, &matrix(theta)?).map_err(value_err)
}

#[pyfunction]
fn stability_check<'py>(py: Python<'py>, q: Vec<f64>, p: Vec<f64>, k: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &gate::stability_check(&q, &p, k).map_err(value_err)?)
}

#[pyfunction]
fn pinsker_check(py: Python<'_>, p: Vec<f64>, q: Vec<f64>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &gate::pinsker_check(&p, &q))
}

#[pyfunction]
fn reuse_mass(p: Vec<f64>, prev_set: Vec<usize>, k: usize) -> PyResult<f64> {
    objective::reuse_mass(&p, &prev_set, k).map_err(value_err)
}

/// Loss terms of the locality objective. `weights` is a dict of overrides.
#[pyfunction]
#[pyo3(signature = (theta, theta0, hiddens, weights = None, step = 1))]
fn total_objective<'py>(
    py: Python<'py>,
    theta: Vec<Vec<f64>>,
    theta0: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
    weights: Option<&Bound<'py, PyAny>>,
    step: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let w = self::weights(weights)?;
    let hs = HiddenSequence::new(matrix(hiddens)?).map_err(value_err)?;
    let b = objective::total_objective(&matrix(theta)?, &matrix(theta0)?, &hs, &w, step).map_err(value_err)?;
    to_py(py, &b)
}

/// Analytic gradient of the objective with respect to `theta`.
#[pyfunction]
#[pyo3(signature = (theta, theta0, hiddens, weights = None, step = 1))]
fn grad_total(
    theta: Vec<Vec<f64>>,
    theta0: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
    weights: Option<&Bound<'_, PyAny>>,
    step: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let w = self::weights(weights)?;
    let hs = HiddenSequence::new(matrix(hiddens)?).map_err(value_err)?;
    let g = objective::grad_total(&matrix(theta)?, &matrix(theta0)?, &hs, &w, step).map_err(value_err)?;
    Ok(rows(&g))
}

#[pyfunction]
#[pyo3(signature = (instances = 20, seed = 0, step = 1e-5))]
fn gradcheck(py: Python<'_>, instances: usize, seed: u64, step: f64) -> PyResult<Bound<'_, PyAny>> {
    let r = py.detach(|| objective::gradcheck(instances, seed, step)).map_err(value_err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (p, prev_set, k, n_samples = 100_000, seed = 0))]
fn mc_reuse_expectation(
    py: Python<'_>,
    p: Vec<f64>,
    prev_set: Vec<usize>,
    k: usize,
    n_samples: usize,
    seed: u64,
) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &objective::mc_reuse_expectation(&p, &prev_set, k, n_samples, seed).map_err(value_err)?)
}

/// Train a toy gate. `config` is an experiment dict (data, n_experts,
/// init_scale, weights, train); missing fields take their defaults.
/// Returns the initial and final statistics, the trained gate and the log.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn run_experiment<'py>(py: Python<'py>, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ExperimentConfig = config.map_or_else(|| Ok(ExperimentConfig::default()), from_py)?;
    let exp = py.detach(|| objective::run_experiment(&cfg)).map_err(value_err)?;
    let out = to_py(py, &exp)?;
    out.set_item("theta", rows(&exp.theta))?;
    out.set_item("theta0", rows(&exp.theta0))?;
    out.set_item("log", to_py(py, &exp.log)?)?;
    Ok(out)
}

#[pymodule]
fn remoe_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<RoutingTrace>()?;
    m.add_function(wrap_pyfunction!(metrics_report, m)?)?;
    m.add_function(wrap_pyfunction!(instantaneous_reuse, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_tpot, m)?)?;
    m.add_function(wrap_pyfunction!(check_step_bound, m)?)?;
    m.add_function(wrap_pyfunction!(check_working_set_bound, m)?)?;
    m.add_function(wrap_pyfunction!(run_counterexamples, m)?)?;
    m.add_function(wrap_pyfunction!(bound_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(topk, m)?)?;
    m.add_function(wrap_pyfunction!(gate_forward, m)?)?;
    m.add_function(wrap_pyfunction!(stability_check, m)?)?;
    m.add_function(wrap_pyfunction!(pinsker_check, m)?)?;
    m.add_function(wrap_pyfunction!(reuse_mass, m)?)?;
    m.add_function(wrap_pyfunction!(total_objective, m)?)?;
    m.add_function(wrap_pyfunction!(grad_total, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(mc_reuse_expectation, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
