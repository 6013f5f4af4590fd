//! Routing-locality and concentration metrics over a trace.

use serde::Serialize;

use crate::trace::{RoutingTrace, PROB_SUM_TOL};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("expert sets must both have {k} entries (got {prev} and {cur})")]
    SetSize { k: usize, prev: usize, cur: usize },
    #[error("every segment has a single step; overlap is undefined")]
    NoAdjacentSteps,
    #[error("negative probability {0}")]
    NegativeProbability(f64),
    #[error("probabilities sum to {0}")]
    BadSum(f64),
    #[error("selection counts are all zero")]
    ZeroCounts,
}

/// `|cur ∩ prev| / k`.
pub fn instantaneous_reuse(prev: &[usize], cur: &[usize], k: usize) -> Result<f64, MetricsError> {
    if prev.len() != k || cur.len() != k || k == 0 {
        return Err(MetricsError::SetSize {
            k,
            prev: prev.len(),
            cur: cur.len(),
        });
    }
    Ok(overlap(prev, cur) as f64 / k as f64)
}

pub(crate) fn overlap(a: &[usize], b: &[usize]) -> usize {
    b.iter().filter(|e| a.contains(e)).count()
}

/// Expert overlap of one (segment, layer, batch) sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceEor {
    pub segment: usize,
    pub layer: usize,
    pub batch: usize,
    pub eor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EorReport {
    pub sequences: Vec<SequenceEor>,
    /// Mean over sequences of each layer.
    pub per_layer: Vec<f64>,
    /// Unweighted mean of per-sequence EOR.
    pub mean: f64,
    /// Mean of IR over every adjacent pair in the trace.
    pub pooled: f64,
}

/// Mean step-to-step overlap, per (segment, layer, batch) sequence.
/// Segments with a single step contribute nothing.
pub fn eor(trace: &RoutingTrace) -> Result<EorReport, MetricsError> {
    let h = trace.header;
    let k = h.top_k;
    let mut sequences = Vec::new();
    let mut layer_sum = vec![0.0; h.n_moe_layers];
    let mut layer_n = vec![0usize; h.n_moe_layers];
    let mut pooled_sum = 0.0;
    let mut pooled_n = 0usize;

    for (s, &len) in trace.segment_lengths().iter().enumerate() {
        if len < 2 {
            continue;
        }
        for l in 0..h.n_moe_layers {
            for b in 0..h.batch_size {
                let mut sum = 0.0;
                for t in 1..len {
                    let prev = &trace.record(s, t - 1, l, b).topk;
                    let cur = &trace.record(s, t, l, b).topk;
                    sum += instantaneous_reuse(prev, cur, k)?;
                }
                pooled_sum += sum;
                pooled_n += len - 1;
                let e = sum / (len - 1) as f64;
                layer_sum[l] += e;
                layer_n[l] += 1;
                sequences.push(SequenceEor {
                    segment: s,
                    layer: l,
                    batch: b,
                    eor: e,
                });
            }
        }
    }
    if sequences.is_empty() {
        return Err(MetricsError::NoAdjacentSteps);
    }
    let mean = sequences.iter().map(|x| x.eor).sum::<f64>() / sequences.len() as f64;
    Ok(EorReport {
        per_layer: layer_sum
            .iter()
            .zip(&layer_n)
            .map(|(s, n)| s / *n as f64)
            .collect(),
        mean,
        pooled: pooled_sum / pooled_n as f64,
        sequences,
    })
}

/// Shannon entropy divided by `ln N_r`; `0 log 0 = 0`.
pub fn normalized_entropy(p: &[f64]) -> Result<f64, MetricsError> {
    if let Some(x) = p.iter().find(|x| **x < 0.0) {
        return Err(MetricsError::NegativeProbability(*x));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(MetricsError::BadSum(sum));
    }
    if p.len() < 2 {
        return Ok(0.0);
    }
    let h: f64 = p.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum();
    Ok((h / (p.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Population standard deviation over mean of per-expert counts.
pub fn load_balance_cv(counts: &[u64]) -> Result<f64, MetricsError> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(MetricsError::ZeroCounts);
    }
    let n = counts.len() as f64;
    let mean = total as f64 / n;
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(var.sqrt() / mean)
}

/// Routed-slot counts per expert for one layer, over the whole trace.
pub fn selection_counts(trace: &RoutingTrace, layer: usize) -> Vec<u64> {
    let mut counts = vec![0u64; trace.header.n_routed_experts];
    for r in trace.records().iter().filter(|r| r.layer == layer) {
        for &e in &r.topk {
            counts[e] += 1;
        }
    }
    counts
}

fn unique_in_sequence(trace: &RoutingTrace, s: usize, l: usize, b: usize) -> usize {
    let mut seen = vec![false; trace.header.n_routed_experts];
    for r in trace.sequence(s, l, b) {
        for &e in &r.topk {
            seen[e] = true;
        }
    }
    seen.iter().filter(|x| **x).count()
}

/// Mean number of distinct experts visited per (segment, layer, batch)
/// sequence, optionally restricted to one layer.
pub fn unique_experts_per_sequence(trace: &RoutingTrace, layer: Option<usize>) -> f64 {
    let h = trace.header;
    let layers: Vec<usize> = match layer {
        Some(l) => vec![l],
        None => (0..h.n_moe_layers).collect(),
    };
    let mut total = 0usize;
    let mut n = 0usize;
    for s in 0..trace.n_segments() {
        for &l in &layers {
            for b in 0..h.batch_size {
                total += unique_in_sequence(trace, s, l, b);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        total as f64 / n as f64
    }
}

fn mean_entropy(trace: &RoutingTrace, layer: Option<usize>) -> Option<f64> {
    if !trace.header.has_probs {
        return None;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in trace.records() {
        if layer.is_some_and(|l| l != r.layer) {
            continue;
        }
        let p = r.probs.as_ref()?;
        sum += normalized_entropy(p).ok()?;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub eor: f64,
    /// `None` when the trace carries no distributions.
    pub entropy_norm: Option<f64>,
    pub load_cv: f64,
    pub unique_experts_per_sequence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub eor: f64,
    pub eor_pooled: f64,
    pub mean_ir_per_layer: Vec<f64>,
    pub entropy_norm: Option<f64>,
    pub load_cv: f64,
    pub unique_experts_per_sequence: f64,
    pub layers: Vec<LayerMetrics>,
}

pub fn metrics_report(trace: &RoutingTrace) -> Result<MetricsReport, MetricsError> {
    let eor_report = eor(trace)?;
    let n_layers = trace.header.n_moe_layers;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        layers.push(LayerMetrics {
            layer: l,
            eor: eor_report.per_layer[l],
            entropy_norm: mean_entropy(trace, Some(l)),
            load_cv: load_balance_cv(&selection_counts(trace, l))?,
            unique_experts_per_sequence: unique_experts_per_sequence(trace, Some(l)),
        });
    }
    let load_cv = layers.iter().map(|m| m.load_cv).sum::<f64>() / n_layers as f64;
    Ok(MetricsReport {
        eor: eor_report.mean,
        eor_pooled: eor_report.pooled,
        mean_ir_per_layer: eor_report.per_layer,
        entropy_norm: mean_entropy(trace, None),
        load_cv,
        unique_experts_per_sequence: unique_experts_per_sequence(trace, None),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{StepRecord, TraceHeader};

    fn seq_trace(n: usize, k: usize, sets: &[&[usize]]) -> RoutingTrace {
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
                topk: s.to_vec(),
                probs: None,
            })
            .collect();
        RoutingTrace::new(header, records).unwrap()
    }

    #[test]
    fn reuse_examples() {
        assert_eq!(instantaneous_reuse(&[1, 2, 3], &[1, 2, 3], 3).unwrap(), 1.0);
        assert_eq!(instantaneous_reuse(&[1, 2, 3], &[4, 5, 6], 3).unwrap(), 0.0);
        assert_eq!(instantaneous_reuse(&[2, 3, 4], &[1, 2, 3], 3).unwrap(), 2.0 / 3.0);
        assert!(instantaneous_reuse(&[1, 2], &[1, 2, 3], 3).is_err());
    }

    #[test]
    fn eor_examples() {
        let t = seq_trace(4, 2, &[&[0, 1], &[0, 1], &[0, 1]]);
        assert_eq!(eor(&t).unwrap().mean, 1.0);
        let t = seq_trace(4, 2, &[&[0, 1], &[1, 2], &[2, 3]]);
        let r = eor(&t).unwrap();
        assert_eq!(r.mean, 0.5);
        assert_eq!(r.per_layer, vec![0.5]);
    }

    #[test]
    fn single_step_segments_are_an_error() {
        let t = seq_trace(4, 2, &[&[0, 1]]);
        assert_eq!(eor(&t).unwrap_err(), MetricsError::NoAdjacentSteps);
    }

    #[test]
    fn entropy_examples() {
        assert!((normalized_entropy(&[1.0 / 64.0; 64]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(normalized_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((normalized_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(normalized_entropy(&[-0.1, 1.1]).is_err());
        assert!(normalized_entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn cv_examples() {
        assert_eq!(load_balance_cv(&[5, 5, 5, 5]).unwrap(), 0.0);
        assert_eq!(load_balance_cv(&[3, 1]).unwrap(), 0.5);
        assert!((load_balance_cv(&[8, 0, 0, 0]).unwrap() - 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(load_balance_cv(&[0, 0]).unwrap_err(), MetricsError::ZeroCounts);
    }

    #[test]
    fn unique_examples() {
        let t = seq_trace(8, 2, &[&[0, 1], &[1, 0], &[0, 1]]);
        assert_eq!(unique_experts_per_sequence(&t, None), 2.0);
        let t = seq_trace(8, 2, &[&[0, 1], &[2, 3]]);
        assert_eq!(unique_experts_per_sequence(&t, None), 4.0);
    }

    #[test]
    fn entropy_unavailable_without_probs() {
        let t = seq_trace(4, 2, &[&[0, 1], &[1, 2]]);
        assert_eq!(metrics_report(&t).unwrap().entropy_norm, None);
    }
}
