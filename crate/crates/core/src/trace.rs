//! Routing traces: per-(segment, step, layer, batch) Top-K records.
//!
//! Expert ids are 0-based (`0..n_routed_experts`). The on-disk format is
//! line-delimited JSON: a mandatory header line followed by one record per
//! line.
//!
//! ```text
//! {"type":"header","n_moe_layers":1,"n_routed_experts":4,"top_k":2,"batch_size":1,"has_probs":false}
//! {"s":0,"t":0,"l":0,"b":0,"topk":[0,1]}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::gate::topk;

/// Tolerance on `sum(probs) == 1` when ingesting records.
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub n_moe_layers: usize,
    pub n_routed_experts: usize,
    pub top_k: usize,
    pub batch_size: usize,
    pub has_probs: bool,
}

impl TraceHeader {
    pub fn check(&self) -> Result<(), TraceError> {
        let bad = |msg: &str| Err(TraceError::InvalidHeader(msg.to_string()));
        if self.n_moe_layers == 0 {
            return bad("n_moe_layers must be >= 1");
        }
        if self.n_routed_experts == 0 {
            return bad("n_routed_experts must be >= 1");
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.top_k > self.n_routed_experts {
            return bad("top_k must not exceed n_routed_experts");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    #[serde(rename = "s")]
    pub segment: usize,
    #[serde(rename = "t")]
    pub step: usize,
    #[serde(rename = "l")]
    pub layer: usize,
    #[serde(rename = "b")]
    pub batch: usize,
    pub topk: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

impl StepRecord {
    pub fn coords(&self) -> Coords {
        Coords {
            segment: self.segment,
            step: self.step,
            layer: self.layer,
            batch: self.batch,
        }
    }

    fn sort_key(&self) -> (usize, usize, usize, usize) {
        (self.segment, self.step, self.layer, self.batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coords {
    pub segment: usize,
    pub step: usize,
    pub layer: usize,
    pub batch: usize,
}

impl fmt::Display for Coords {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(s={}, t={}, l={}, b={})",
            self.segment, self.step, self.layer, self.batch
        )
    }
}

/// A complete routing trace. Records are kept sorted by (segment, step,
/// layer, batch) and cover every (layer, batch) pair for each present step,
/// so individual records can be addressed by arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub header: TraceHeader,
    records: Vec<StepRecord>,
    segment_lengths: Vec<usize>,
    segment_offsets: Vec<usize>,
}

/// Which invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Arity,
    Range,
    Distinctness,
    ProbsPresence,
    ProbsLength,
    ProbsValue,
    ProbsSum,
    ProbsTopK,
    Ordering,
    Duplicate,
    Coverage,
    Contiguity,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::Arity => "arity",
            Rule::Range => "range",
            Rule::Distinctness => "distinctness",
            Rule::ProbsPresence => "probs-presence",
            Rule::ProbsLength => "probs-length",
            Rule::ProbsValue => "probs-value",
            Rule::ProbsSum => "probs-sum",
            Rule::ProbsTopK => "probs-topk",
            Rule::Ordering => "ordering",
            Rule::Duplicate => "duplicate",
            Rule::Coverage => "coverage",
            Rule::Contiguity => "contiguity",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub coords: Coords,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}: {}", self.rule, self.coords, self.detail)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("missing header line")]
    MissingHeader,
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("line {line}: {violation}")]
    Record { line: usize, violation: Violation },
    #[error("{0}")]
    Structure(Violation),
}

impl TraceError {
    /// The violated rule, when the error is an invariant violation.
    pub fn rule(&self) -> Option<Rule> {
        match self {
            TraceError::Record { violation, .. } | TraceError::Structure(violation) => {
                Some(violation.rule)
            }
            _ => None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    #[serde(rename = "type")]
    kind: String,
    n_moe_layers: usize,
    n_routed_experts: usize,
    top_k: usize,
    batch_size: usize,
    has_probs: bool,
}

#[derive(Serialize)]
struct HeaderLineOut<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    #[serde(flatten)]
    header: &'a TraceHeader,
}

/// Per-record checks that need only the header.
fn record_violations(header: &TraceHeader, rec: &StepRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let coords = rec.coords();
    let mut push = |rule, detail: String| out.push(Violation { rule, coords, detail });

    if rec.layer >= header.n_moe_layers {
        push(
            Rule::Range,
            format!("layer {} >= n_moe_layers {}", rec.layer, header.n_moe_layers),
        );
    }
    if rec.batch >= header.batch_size {
        push(
            Rule::Range,
            format!("batch {} >= batch_size {}", rec.batch, header.batch_size),
        );
    }
    if rec.topk.len() != header.top_k {
        push(
            Rule::Arity,
            format!("expected {} experts, got {}", header.top_k, rec.topk.len()),
        );
    }
    for &e in &rec.topk {
        if e >= header.n_routed_experts {
            push(
                Rule::Range,
                format!("expert id {e} >= n_routed_experts {}", header.n_routed_experts),
            );
        }
    }
    for (i, e) in rec.topk.iter().enumerate() {
        if rec.topk[..i].contains(e) {
            push(Rule::Distinctness, format!("expert id {e} repeated"));
        }
    }

    match (&rec.probs, header.has_probs) {
        (None, true) => push(Rule::ProbsPresence, "header declares probs".into()),
        (Some(_), false) => push(Rule::ProbsPresence, "header declares no probs".into()),
        (Some(p), true) => {
            if p.len() != header.n_routed_experts {
                push(
                    Rule::ProbsLength,
                    format!("expected {} probs, got {}", header.n_routed_experts, p.len()),
                );
            } else if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
                push(Rule::ProbsValue, format!("invalid probability {x}"));
            } else {
                let sum: f64 = p.iter().sum();
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    push(Rule::ProbsSum, format!("probabilities sum to {sum}"));
                } else if rec.topk.len() == header.top_k && header.top_k <= p.len() {
                    let mut want = topk(p, header.top_k).unwrap_or_default();
                    let mut got = rec.topk.clone();
                    want.sort_unstable();
                    got.sort_unstable();
                    if want != got {
                        push(
                            Rule::ProbsTopK,
                            format!("topk {:?} differs from Top-K of probs {:?}", rec.topk, want),
                        );
                    }
                }
            }
        }
        (None, false) => {}
    }
    out
}

/// Structural checks over a record list: ordering, duplicates, coverage and
/// step contiguity.
fn structure_violations(header: &TraceHeader, records: &[StepRecord]) -> Vec<Violation> {
    let mut out = Vec::new();
    for w in records.windows(2) {
        if w[1].sort_key() < w[0].sort_key() {
            out.push(Violation {
                rule: Rule::Ordering,
                coords: w[1].coords(),
                detail: format!("record follows {}", w[0].coords()),
            });
        }
    }

    // (segment, step) -> seen (layer, batch) cells
    let cells = header.n_moe_layers * header.batch_size;
    let mut steps: BTreeMap<(usize, usize), Vec<bool>> = BTreeMap::new();
    for rec in records {
        if rec.layer >= header.n_moe_layers || rec.batch >= header.batch_size {
            continue;
        }
        let seen = steps
            .entry((rec.segment, rec.step))
            .or_insert_with(|| vec![false; cells]);
        let slot = rec.layer * header.batch_size + rec.batch;
        if seen[slot] {
            out.push(Violation {
                rule: Rule::Duplicate,
                coords: rec.coords(),
                detail: "record appears more than once".into(),
            });
        }
        seen[slot] = true;
    }
    for (&(segment, step), seen) in &steps {
        for (slot, ok) in seen.iter().enumerate() {
            if !ok {
                out.push(Violation {
                    rule: Rule::Coverage,
                    coords: Coords {
                        segment,
                        step,
                        layer: slot / header.batch_size,
                        batch: slot % header.batch_size,
                    },
                    detail: "no record for this (layer, batch) at a present step".into(),
                });
            }
        }
    }

    // segments 0..S present, steps 0..T_s present
    let mut per_segment: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(s, t) in steps.keys() {
        per_segment.entry(s).or_default().push(t);
    }
    let mut expected_segment = 0;
    for (&s, ts) in &per_segment {
        if s != expected_segment {
            out.push(Violation {
                rule: Rule::Contiguity,
                coords: Coords { segment: s, step: ts[0], layer: 0, batch: 0 },
                detail: format!("segment {s} present but segment {expected_segment} missing"),
            });
        }
        expected_segment = s + 1;
        for (i, &t) in ts.iter().enumerate() {
            if t != i {
                out.push(Violation {
                    rule: Rule::Contiguity,
                    coords: Coords { segment: s, step: t, layer: 0, batch: 0 },
                    detail: format!("step {t} present but step {i} missing"),
                });
                break;
            }
        }
    }
    out
}

/// Check every trace invariant. Returns an empty list iff the records form a
/// valid trace for `header`.
pub fn validate_records(header: &TraceHeader, records: &[StepRecord]) -> Vec<Violation> {
    let mut out: Vec<Violation> = records
        .iter()
        .flat_map(|r| record_violations(header, r))
        .collect();
    out.extend(structure_violations(header, records));
    out
}

pub fn validate_trace(trace: &RoutingTrace) -> Vec<Violation> {
    validate_records(&trace.header, &trace.records)
}

impl RoutingTrace {
    /// Build a trace from records in any order. Records are sorted and every
    /// invariant is checked.
    pub fn new(header: TraceHeader, mut records: Vec<StepRecord>) -> Result<Self, TraceError> {
        header.check()?;
        for rec in &records {
            if let Some(v) = record_violations(&header, rec).into_iter().next() {
                return Err(TraceError::Structure(v));
            }
        }
        records.sort_by_key(StepRecord::sort_key);
        if let Some(v) = structure_violations(&header, &records).into_iter().next() {
            return Err(TraceError::Structure(v));
        }
        Ok(Self::from_sorted_unchecked(header, records))
    }

    fn from_sorted_unchecked(header: TraceHeader, records: Vec<StepRecord>) -> Self {
        let mut segment_lengths: Vec<usize> = Vec::new();
        for rec in &records {
            if rec.segment >= segment_lengths.len() {
                segment_lengths.resize(rec.segment + 1, 0);
            }
            segment_lengths[rec.segment] = segment_lengths[rec.segment].max(rec.step + 1);
        }
        let mut segment_offsets = Vec::with_capacity(segment_lengths.len());
        let mut acc = 0;
        for &len in &segment_lengths {
            segment_offsets.push(acc);
            acc += len;
        }
        Self {
            header,
            records,
            segment_lengths,
            segment_offsets,
        }
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<StepRecord> {
        self.records
    }

    /// Decode steps per segment (`T_s`).
    pub fn segment_lengths(&self) -> &[usize] {
        &self.segment_lengths
    }

    pub fn n_segments(&self) -> usize {
        self.segment_lengths.len()
    }

    /// Total number of (segment, step) pairs.
    pub fn total_steps(&self) -> usize {
        self.segment_lengths.iter().sum()
    }

    /// Index of the first step of `segment` in the flattened step order.
    pub fn segment_offset(&self, segment: usize) -> usize {
        self.segment_offsets[segment]
    }

    fn index(&self, global_step: usize, layer: usize, batch: usize) -> usize {
        let h = &self.header;
        (global_step * h.n_moe_layers + layer) * h.batch_size + batch
    }

    pub fn record(&self, segment: usize, step: usize, layer: usize, batch: usize) -> &StepRecord {
        let g = self.segment_offsets[segment] + step;
        &self.records[self.index(g, layer, batch)]
    }

    /// The record at a flattened step index.
    pub fn record_at(&self, global_step: usize, layer: usize, batch: usize) -> &StepRecord {
        &self.records[self.index(global_step, layer, batch)]
    }

    /// Top-K sets of one (segment, layer, batch) sequence, in step order.
    pub fn sequence(
        &self,
        segment: usize,
        layer: usize,
        batch: usize,
    ) -> impl Iterator<Item = &StepRecord> + '_ {
        (0..self.segment_lengths[segment]).map(move |t| self.record(segment, t, layer, batch))
    }

    /// Restrict the trace to a single batch index, producing a B=1 trace.
    pub fn batch_slice(&self, batch: usize) -> RoutingTrace {
        assert!(batch < self.header.batch_size, "batch index out of range");
        let header = TraceHeader {
            batch_size: 1,
            ..self.header
        };
        let records = self
            .records
            .iter()
            .filter(|r| r.batch == batch)
            .map(|r| StepRecord { batch: 0, ..r.clone() })
            .collect();
        Self::from_sorted_unchecked(header, records)
    }

    /// Copy of the trace with the routed sets replaced and probabilities
    /// dropped. `sets` is indexed like [`RoutingTrace::records`].
    pub fn with_sets(&self, sets: Vec<Vec<usize>>) -> RoutingTrace {
        assert_eq!(sets.len(), self.records.len());
        let header = TraceHeader {
            has_probs: false,
            ..self.header
        };
        let records = self
            .records
            .iter()
            .zip(sets)
            .map(|(r, topk)| StepRecord {
                topk,
                probs: None,
                ..r.clone()
            })
            .collect();
        Self::from_sorted_unchecked(header, records)
    }
}

fn parse_header_line(line_no: usize, line: &str) -> Result<TraceHeader, TraceError> {
    let h: HeaderLine = serde_json::from_str(line).map_err(|e| TraceError::Malformed {
        line: line_no,
        msg: format!("bad header: {e}"),
    })?;
    if h.kind != "header" {
        return Err(TraceError::Malformed {
            line: line_no,
            msg: format!("expected header record, found type {:?}", h.kind),
        });
    }
    let header = TraceHeader {
        n_moe_layers: h.n_moe_layers,
        n_routed_experts: h.n_routed_experts,
        top_k: h.top_k,
        batch_size: h.batch_size,
        has_probs: h.has_probs,
    };
    header.check()?;
    Ok(header)
}

/// Header and records of a trace stream, each record with its 1-based line
/// number. Only syntax is checked.
fn read_lines<R: BufRead>(reader: R) -> Result<(TraceHeader, Vec<(usize, StepRecord)>), TraceError> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(parse_header_line(i + 1, &line)?);
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push((i + 1, rec));
    }
    Ok((header.ok_or(TraceError::MissingHeader)?, records))
}

/// Read a trace without enforcing record invariants, for reporting every
/// violation at once. Records come back in normalized order.
pub fn read_records<R: BufRead>(reader: R) -> Result<(TraceHeader, Vec<StepRecord>), TraceError> {
    let (header, lines) = read_lines(reader)?;
    let mut records: Vec<StepRecord> = lines.into_iter().map(|(_, r)| r).collect();
    records.sort_by_key(StepRecord::sort_key);
    Ok((header, records))
}

/// Parse a line-delimited trace. Records may appear in any order; the result
/// is normalized to sorted order.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<RoutingTrace, TraceError> {
    let (header, lines) = read_lines(reader)?;
    let mut records = Vec::with_capacity(lines.len());
    for (line, rec) in lines {
        if let Some(violation) = record_violations(&header, &rec).into_iter().next() {
            return Err(TraceError::Record { line, violation });
        }
        records.push(rec);
    }
    records.sort_by_key(StepRecord::sort_key);
    if let Some(v) = structure_violations(&header, &records).into_iter().next() {
        return Err(TraceError::Structure(v));
    }
    Ok(RoutingTrace::from_sorted_unchecked(header, records))
}

pub fn write_trace<W: Write>(trace: &RoutingTrace, mut out: W) -> std::io::Result<()> {
    let header = HeaderLineOut {
        kind: "header",
        header: &trace.header,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for rec in &trace.records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Parameters of the synthetic trace generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_moe_layers: usize,
    pub n_routed_experts: usize,
    pub top_k: usize,
    pub batch_size: usize,
    pub n_segments: usize,
    pub steps_per_segment: usize,
    /// Probability of keeping each previous-step expert.
    pub stickiness: f64,
    pub seed: u64,
    pub emit_probs: bool,
    /// Dirichlet concentration of emitted distributions; smaller is sharper.
    pub concentration: f64,
    /// Draw an independent expert-set stream per batch item instead of
    /// sharing one stream across the batch.
    pub independent_batches: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_moe_layers: 1,
            n_routed_experts: 64,
            top_k: 6,
            batch_size: 1,
            n_segments: 1,
            steps_per_segment: 64,
            stickiness: 0.5,
            seed: 0,
            emit_probs: false,
            concentration: 0.5,
            independent_batches: false,
        }
    }
}

impl SynthConfig {
    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            n_moe_layers: self.n_moe_layers,
            n_routed_experts: self.n_routed_experts,
            top_k: self.top_k,
            batch_size: self.batch_size,
            has_probs: self.emit_probs,
        }
    }

    pub fn check(&self) -> Result<(), TraceError> {
        self.header().check()?;
        if !(0.0..=1.0).contains(&self.stickiness) {
            return Err(TraceError::InvalidHeader("stickiness must lie in [0, 1]".into()));
        }
        if self.steps_per_segment == 0 {
            return Err(TraceError::InvalidHeader("steps_per_segment must be >= 1".into()));
        }
        if self.emit_probs && !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(TraceError::InvalidHeader("concentration must be > 0".into()));
        }
        Ok(())
    }
}

/// Next expert set: keep each previous expert with probability `p`, then fill
/// uniformly from experts not yet chosen this step.
fn sticky_step(rng: &mut ChaCha8Rng, prev: Option<&[usize]>, n: usize, k: usize, p: f64) -> Vec<usize> {
    let mut set: Vec<usize> = match prev {
        Some(prev) => prev.iter().copied().filter(|_| rng.random_bool(p)).collect(),
        None => Vec::new(),
    };
    let pool: Vec<usize> = (0..n).filter(|e| !set.contains(e)).collect();
    let need = k - set.len();
    for i in index::sample(rng, pool.len(), need).into_iter() {
        set.push(pool[i]);
    }
    set
}

/// Emit a distribution whose Top-K is exactly `set`, ordering `set` by
/// descending probability.
fn emit_probs(rng: &mut ChaCha8Rng, set: &mut [usize], n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let k = set.len();
    loop {
        let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE)).collect();
        w.sort_by(|a, b| b.total_cmp(a));
        if k < n && w[k - 1] <= w[k] {
            continue;
        }
        let total: f64 = w.iter().sum();
        let mut probs = vec![0.0; n];
        for (slot, &e) in set.iter().enumerate() {
            probs[e] = w[slot] / total;
        }
        let mut rest: Vec<usize> = (0..n).filter(|e| !set.contains(e)).collect();
        // shuffle the tail assignment
        for i in (1..rest.len()).rev() {
            let j = rng.random_range(0..=i);
            rest.swap(i, j);
        }
        for (slot, &e) in rest.iter().enumerate() {
            probs[e] = w[k + slot] / total;
        }
        let ranked = topk(&probs, k).expect("k <= n");
        let mut want = ranked.clone();
        let mut got = set.to_vec();
        want.sort_unstable();
        got.sort_unstable();
        if want != got {
            // normalization collapsed a boundary gap; redraw
            continue;
        }
        set.copy_from_slice(&ranked);
        return probs;
    }
}

/// Generate a synthetic trace with controllable step-to-step stickiness.
/// Deterministic for a fixed seed.
pub fn synth_trace(cfg: &SynthConfig) -> Result<RoutingTrace, TraceError> {
    cfg.check()?;
    let header = cfg.header();
    let streams = if cfg.independent_batches { cfg.batch_size } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.n_segments * cfg.steps_per_segment * cfg.n_moe_layers * cfg.batch_size;
    let mut records = Vec::with_capacity(total);

    for s in 0..cfg.n_segments {
        let mut prev: Vec<Vec<Option<Vec<usize>>>> = vec![vec![None; streams]; cfg.n_moe_layers];
        for t in 0..cfg.steps_per_segment {
            for (l, layer_prev) in prev.iter_mut().enumerate() {
                let mut produced: Vec<(Vec<usize>, Option<Vec<f64>>)> = Vec::with_capacity(streams);
                for slot in layer_prev.iter_mut() {
                    let mut set = sticky_step(
                        &mut rng,
                        slot.as_deref(),
                        cfg.n_routed_experts,
                        cfg.top_k,
                        cfg.stickiness,
                    );
                    let probs = cfg
                        .emit_probs
                        .then(|| emit_probs(&mut rng, &mut set, cfg.n_routed_experts, cfg.concentration));
                    *slot = Some(set.clone());
                    produced.push((set, probs));
                }
                for b in 0..cfg.batch_size {
                    let (set, probs) = &produced[if cfg.independent_batches { b } else { 0 }];
                    records.push(StepRecord {
                        segment: s,
                        step: t,
                        layer: l,
                        batch: b,
                        topk: set.clone(),
                        probs: probs.clone(),
                    });
                }
            }
        }
    }
    Ok(RoutingTrace::from_sorted_unchecked(header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hdr(layers: usize, n: usize, k: usize, b: usize, probs: bool) -> TraceHeader {
        TraceHeader {
            n_moe_layers: layers,
            n_routed_experts: n,
            top_k: k,
            batch_size: b,
            has_probs: probs,
        }
    }

    fn rec(s: usize, t: usize, l: usize, b: usize, topk: &[usize]) -> StepRecord {
        StepRecord {
            segment: s,
            step: t,
            layer: l,
            batch: b,
            topk: topk.to_vec(),
            probs: None,
        }
    }

    fn parse_str(s: &str) -> Result<RoutingTrace, TraceError> {
        parse_trace(s.as_bytes())
    }

    const H4: &str = r#"{"type":"header","n_moe_layers":1,"n_routed_experts":4,"top_k":2,"batch_size":1,"has_probs":false}"#;

    #[test]
    fn minimal_trace_parses() {
        let text = format!(
            "{H4}\n{}\n{}\n",
            r#"{"s":0,"t":0,"l":0,"b":0,"topk":[0,1]}"#,
            r#"{"s":0,"t":1,"l":0,"b":0,"topk":[1,2]}"#
        );
        let trace = parse_str(&text).unwrap();
        assert_eq!(trace.records().len(), 2);
        assert_eq!(trace.segment_lengths(), &[2]);
    }

    #[test]
    fn out_of_range_expert_is_rejected() {
        let text = format!("{H4}\n{}\n", r#"{"s":0,"t":0,"l":0,"b":0,"topk":[0,4]}"#);
        let err = parse_str(&text).unwrap_err();
        assert_eq!(err.rule(), Some(Rule::Range));
        assert!(matches!(err, TraceError::Record { line: 2, .. }));
    }

    #[test]
    fn wrong_arity_is_rejected() {
        let text = format!("{H4}\n{}\n", r#"{"s":0,"t":0,"l":0,"b":0,"topk":[0]}"#);
        assert_eq!(parse_str(&text).unwrap_err().rule(), Some(Rule::Arity));
    }

    #[test]
    fn probs_inconsistent_with_topk() {
        // Top-2 of [0.1,0.2,0.3,0.4] is {3,2}
        let text = concat!(
            r#"{"type":"header","n_moe_layers":1,"n_routed_experts":4,"top_k":2,"batch_size":1,"has_probs":true}"#,
            "\n",
            r#"{"s":0,"t":0,"l":0,"b":0,"topk":[0,1],"probs":[0.1,0.2,0.3,0.4]}"#,
            "\n"
        );
        assert_eq!(parse_str(text).unwrap_err().rule(), Some(Rule::ProbsTopK));
        let ok = text.replace("[0,1]", "[2,3]");
        assert!(parse_str(&ok).is_ok());
    }

    #[test]
    fn malformed_line_reports_position() {
        let text = format!("{H4}\n{}\nnot json\n", r#"{"s":0,"t":0,"l":0,"b":0,"topk":[0,1]}"#);
        assert!(matches!(
            parse_str(&text).unwrap_err(),
            TraceError::Malformed { line: 3, .. }
        ));
    }

    #[test]
    fn missing_coverage_is_an_error() {
        let header = hdr(2, 4, 2, 1, false);
        let mut records = Vec::new();
        for t in 0..4 {
            records.push(rec(0, t, 0, 0, &[0, 1]));
            if t != 3 {
                records.push(rec(0, t, 1, 0, &[0, 1]));
            }
        }
        let v = validate_records(&header, &records);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::Coverage);
        assert_eq!(
            v[0].coords,
            Coords { segment: 0, step: 3, layer: 1, batch: 0 }
        );
        assert!(RoutingTrace::new(header, records).is_err());
    }

    #[test]
    fn duplicated_expert_is_one_violation() {
        let header = hdr(1, 4, 2, 1, false);
        let v = validate_records(&header, &[rec(0, 0, 0, 0, &[1, 1])]);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::Distinctness);
    }

    #[test]
    fn valid_trace_has_no_violations() {
        let header = hdr(1, 4, 2, 1, false);
        let trace = RoutingTrace::new(
            header,
            vec![rec(0, 1, 0, 0, &[1, 2]), rec(0, 0, 0, 0, &[0, 1])],
        )
        .unwrap();
        assert!(validate_trace(&trace).is_empty());
        assert_eq!(trace.records()[0].step, 0);
    }

    #[test]
    fn step_gap_is_a_contiguity_violation() {
        let header = hdr(1, 4, 2, 1, false);
        let v = validate_records(&header, &[rec(0, 0, 0, 0, &[0, 1]), rec(0, 2, 0, 0, &[0, 1])]);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::Contiguity);
    }

    #[test]
    fn empty_trace_writes_header_only() {
        let trace = RoutingTrace::new(hdr(1, 4, 2, 1, false), vec![]).unwrap();
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(format!("{H4}\n"), text);
        assert_eq!(parse_str(&text).unwrap(), trace);
    }

    #[test]
    fn two_segments_round_trip() {
        let header = hdr(1, 4, 2, 1, false);
        let trace = RoutingTrace::new(
            header,
            vec![
                rec(0, 0, 0, 0, &[0, 1]),
                rec(0, 1, 0, 0, &[1, 2]),
                rec(0, 2, 0, 0, &[2, 3]),
                rec(1, 0, 0, 0, &[3, 0]),
                rec(1, 1, 0, 0, &[0, 1]),
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let back = parse_trace(buf.as_slice()).unwrap();
        assert_eq!(back.segment_lengths(), &[3, 2]);
        assert_eq!(back, trace);
    }

    #[test]
    fn full_stickiness_repeats_one_set_per_segment() {
        let cfg = SynthConfig {
            n_segments: 3,
            steps_per_segment: 20,
            stickiness: 1.0,
            seed: 7,
            ..Default::default()
        };
        let trace = synth_trace(&cfg).unwrap();
        for s in 0..3 {
            let first = trace.record(s, 0, 0, 0).topk.clone();
            assert!(trace.sequence(s, 0, 0).all(|r| r.topk == first));
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig {
            n_moe_layers: 2,
            batch_size: 2,
            emit_probs: true,
            seed: 99,
            ..Default::default()
        };
        let write = |t: &RoutingTrace| {
            let mut buf = Vec::new();
            write_trace(t, &mut buf).unwrap();
            buf
        };
        assert_eq!(
            write(&synth_trace(&cfg).unwrap()),
            write(&synth_trace(&cfg).unwrap())
        );
    }

    #[test]
    fn shared_batch_stream_duplicates_sets() {
        let cfg = SynthConfig {
            batch_size: 3,
            steps_per_segment: 10,
            seed: 3,
            ..Default::default()
        };
        let trace = synth_trace(&cfg).unwrap();
        for t in 0..10 {
            let a = &trace.record(0, t, 0, 0).topk;
            assert_eq!(a, &trace.record(0, t, 0, 2).topk);
        }
        let indep = synth_trace(&SynthConfig {
            independent_batches: true,
            ..cfg
        })
        .unwrap();
        assert!((0..10).any(|t| indep.record(0, t, 0, 0).topk != indep.record(0, t, 0, 1).topk));
    }

    #[test]
    fn emitted_probs_rank_the_routed_set() {
        let cfg = SynthConfig {
            n_routed_experts: 8,
            top_k: 3,
            emit_probs: true,
            concentration: 0.3,
            steps_per_segment: 50,
            seed: 11,
            ..Default::default()
        };
        let trace = synth_trace(&cfg).unwrap();
        assert!(validate_trace(&trace).is_empty());
        for r in trace.records() {
            assert_eq!(r.topk, topk(r.probs.as_ref().unwrap(), 3).unwrap());
        }
    }
}
