#![allow(dead_code)]

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use remoe_core::cache::Policy;
use remoe_core::trace::{RoutingTrace, StepRecord, TraceHeader};

/// Random trace with arbitrary (non-sticky) Top-K sets.
pub fn tiny_trace(seed: u64, max_experts: usize, max_steps: usize) -> RoutingTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_experts);
    let k = rng.random_range(1..=n.min(3));
    let layers = rng.random_range(1..=2);
    let batch = rng.random_range(1..=2);
    let n_seg = rng.random_range(1..=3);
    let mut lens: Vec<usize> = (0..n_seg).map(|_| rng.random_range(1..=max_steps / n_seg)).collect();
    lens[0] = lens[0].max(2);
    // a small alphabet per trace so that hits actually happen
    let alphabet = rng.random_range(k..=n);
    let header = TraceHeader {
        n_moe_layers: layers,
        n_routed_experts: n,
        top_k: k,
        batch_size: batch,
        has_probs: false,
    };
    let mut records = Vec::new();
    for (s, &len) in lens.iter().enumerate() {
        for t in 0..len {
            for l in 0..layers {
                for b in 0..batch {
                    let topk = index::sample(&mut rng, alphabet, k).into_vec();
                    records.push(StepRecord {
                        segment: s,
                        step: t,
                        layer: l,
                        batch: b,
                        topk,
                        probs: None,
                    });
                }
            }
        }
    }
    RoutingTrace::new(header, records).expect("well-formed")
}

/// Per-step request of one layer: batch slots flattened, deduplicated in order.
pub fn requests(trace: &RoutingTrace, layer: usize) -> Vec<Vec<usize>> {
    (0..trace.total_steps())
        .map(|g| {
            let mut out: Vec<usize> = Vec::new();
            for b in 0..trace.header.batch_size {
                for &e in &trace.record_at(g, layer, b).topk {
                    if !out.contains(&e) {
                        out.push(e);
                    }
                }
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaiveRun {
    pub hits: Vec<u64>,
    pub misses: Vec<u64>,
    pub token_hits: Vec<u64>,
    pub evictions: u64,
    pub final_resident: Vec<usize>,
}

/// Straightforward list-based cache. `order` holds residents from least to
/// most recently used (LRU/LFU) or oldest to newest admission (FIFO);
/// BELADY rescans the remaining trace at every eviction.
pub fn naive_simulate(trace: &RoutingTrace, layer: usize, capacity: usize, policy: Policy, reset: bool) -> NaiveRun {
    let reqs = requests(trace, layer);
    let seg_of: Vec<usize> = (0..trace.n_segments())
        .flat_map(|s| std::iter::repeat_n(s, trace.segment_lengths()[s]))
        .collect();
    let mut order: Vec<usize> = Vec::new();
    let mut counts = vec![0u64; trace.header.n_routed_experts];
    let mut run = NaiveRun {
        hits: Vec::new(),
        misses: Vec::new(),
        token_hits: Vec::new(),
        evictions: 0,
        final_resident: Vec::new(),
    };
    for (g, req) in reqs.iter().enumerate() {
        if reset && (g == 0 || seg_of[g] != seg_of[g - 1]) {
            order.clear();
            counts.iter_mut().for_each(|c| *c = 0);
        }
        let tokens: usize = (0..trace.header.batch_size)
            .flat_map(|b| trace.record_at(g, layer, b).topk.clone())
            .filter(|e| order.contains(e))
            .count();
        let hits = req.iter().filter(|e| order.contains(e)).count() as u64;
        run.hits.push(hits);
        run.misses.push(req.len() as u64 - hits);
        run.token_hits.push(tokens as u64);
        for &e in req {
            counts[e] += 1;
            if let Some(pos) = order.iter().position(|&x| x == e) {
                if policy != Policy::Fifo {
                    order.remove(pos);
                    order.push(e);
                }
                continue;
            }
            if order.len() >= capacity {
                let free: Vec<usize> = order.iter().copied().filter(|x| !req.contains(x)).collect();
                let victim = match policy {
                    Policy::Lru | Policy::Fifo => free.first().copied(),
                    Policy::Lfu => {
                        let lo = free.iter().map(|&x| counts[x]).min();
                        free.iter().copied().find(|&x| Some(counts[x]) == lo)
                    }
                    Policy::Belady => {
                        let next = |x: usize| {
                            (g + 1..reqs.len())
                                .take_while(|&j| !reset || seg_of[j] == seg_of[g])
                                .find(|&j| reqs[j].contains(&x))
                                .unwrap_or(usize::MAX)
                        };
                        let far = free.iter().map(|&x| next(x)).max();
                        free.iter().copied().filter(|&x| Some(next(x)) == far).min()
                    }
                };
                let Some(v) = victim else { continue };
                order.retain(|&x| x != v);
                run.evictions += 1;
            }
            order.push(e);
        }
    }
    order.sort_unstable();
    run.final_resident = order;
    run
}

/// Compare the engine against [`naive_simulate`] on every layer.
pub fn check_against_reference(trace: &RoutingTrace, capacity: usize, policy: Policy) -> Result<(), String> {
    use remoe_core::cache::{simulate_layer, CacheConfig};
    let cfg = CacheConfig::new(capacity, policy);
    for l in 0..trace.header.n_moe_layers {
        let run = simulate_layer(trace, l, &cfg, false).map_err(|e| e.to_string())?;
        let naive = naive_simulate(trace, l, capacity, policy, true);
        let hits: Vec<u64> = run.steps.iter().map(|s| s.unique_hits).collect();
        let misses: Vec<u64> = run.steps.iter().map(|s| s.unique_misses).collect();
        let token_hits: Vec<u64> = run.steps.iter().map(|s| s.token_hits).collect();
        let got = NaiveRun {
            hits,
            misses,
            token_hits,
            evictions: run.evictions,
            final_resident: run.final_resident.clone(),
        };
        if got != naive {
            return Err(format!("{policy} C={capacity} layer {l}: engine {got:?} vs reference {naive:?}"));
        }
    }
    Ok(())
}

pub const BIN: &str = env!("CARGO_BIN_EXE_remoe-lab");

pub fn lab(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    std::process::Command::new(BIN)
        .current_dir(dir)
        .env_remove("REMOE_LAB_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

/// One invocation of every subcommand, all writing into the working directory.
pub fn every_subcommand(dir: &std::path::Path) -> Vec<Vec<&'static str>> {
    std::fs::write(
        dir.join("exp.json"),
        r#"{"data": {"n_sequences": 2, "seq_len": 24}, "train": {"steps": 40}}"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("grid.json"),
        r#"{"base": {"data": {"n_sequences": 2, "seq_len": 24}, "train": {"steps": 20}},
            "grid": {"lambda_reuse": [0.0, 0.2], "lags": [[1, 2], [1, 4, 16]]}}"#,
    )
    .unwrap();
    let synth = "synth --out t.jsonl --probs --seed 5 --steps 32 --segments 2 --layers 2 --batch 2 --experts 16 --top-k 4";
    [
        synth,
        "validate --trace t.jsonl --out v.json",
        "metrics --trace t.jsonl --per-layer --out m.csv",
        "metrics --trace t.jsonl --out m.json",
        "simulate --trace t.jsonl --capacity 6 --policy lfu --expert-bytes 1e6 --bandwidth-gbps 10 --compute-ms 2 --out s.csv",
        "simulate --trace t.jsonl --capacity 6 --beta 1 --out r.json",
        "simulate --trace t.jsonl --capacity 6 --fault interference --fault-n 2 --seed 3 --out f.csv",
        "bound-check --trace t.jsonl --capacity 4 --working-set --out b.json",
        "bound-check --campaign 20 --seed 1 --out bc.json",
        "bound-check --counterexamples --out cx.json",
        "router --check stability --trials 2000 --seed 4 --out st.json",
        "router --check pinsker --trials 2000 --seed 4 --out pk.json",
        "train --config exp.json --seed 2 --out-theta theta.json --log log.csv --out tr.json",
        "gradcheck --seed 3 --instances 3 --out g.json",
        "sweep --config grid.json --out sw.csv",
    ]
    .iter()
    .map(|s| s.split_whitespace().collect())
    .collect()
}

fn output_files(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name != "manifest.jsonl" && name != "exp.json" && name != "grid.json"
        })
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

/// Run every subcommand twice and compare all produced files byte for byte.
/// Returns the number of files compared.
pub fn determinism_check(dir: &std::path::Path) -> Result<usize, String> {
    let mut runs = Vec::new();
    for _ in 0..2 {
        for entry in std::fs::read_dir(dir).unwrap() {
            std::fs::remove_file(entry.unwrap().path()).unwrap();
        }
        for args in every_subcommand(dir) {
            let out = lab(dir, &args);
            if !out.status.success() {
                return Err(format!(
                    "`{}` exited with {:?}: {}",
                    args.join(" "),
                    out.status.code(),
                    String::from_utf8_lossy(&out.stderr)
                ));
            }
        }
        runs.push(output_files(dir));
    }
    let (a, b) = (&runs[0], &runs[1]);
    if a.keys().ne(b.keys()) {
        return Err(format!("different file sets: {:?} vs {:?}", a.keys(), b.keys()));
    }
    for (name, bytes) in a {
        if &b[name] != bytes {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(a.len())
}
