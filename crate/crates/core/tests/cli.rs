mod common;

use common::lab;

fn code(dir: &std::path::Path, args: &str) -> Option<i32> {
    lab(dir, &args.split_whitespace().collect::<Vec<_>>()).status.code()
}

#[test]
fn every_subcommand_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let n = common::determinism_check(dir.path()).unwrap();
    assert!(n >= 18, "only {n} files compared");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, "--help"), Some(0));
    assert_eq!(code(d, "--version"), Some(0));
    assert_eq!(code(d, "frobnicate"), Some(1));
    assert_eq!(code(d, "synth --out t.jsonl --steps 16 --experts 8 --top-k 2"), Some(0));
    assert_eq!(code(d, "simulate --trace t.jsonl --out s.csv"), Some(1));
    assert_eq!(code(d, "simulate --trace missing.jsonl --capacity 2 --out s.csv"), Some(2));
    assert_eq!(code(d, "metrics --trace t.jsonl --out m.csv"), Some(0));
    assert!(d.join("m.csv").exists());
    assert_eq!(code(d, "bound-check --counterexamples"), Some(0));
    // under capacity the step bound does not apply
    assert_eq!(code(d, "bound-check --trace t.jsonl --capacity 1"), Some(1));
    assert_eq!(code(d, "gradcheck --instances 2 --tol 1e-30"), Some(3));
}

#[test]
fn validate_reports_bad_traces_as_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let text = concat!(
        r#"{"type":"header","n_moe_layers":1,"n_routed_experts":4,"top_k":2,"batch_size":1,"has_probs":false}"#,
        "\n",
        r#"{"s":0,"t":0,"l":0,"b":0,"topk":[0,4]}"#,
        "\n",
        r#"{"s":0,"t":1,"l":0,"b":0,"topk":[1,2]}"#,
        "\n"
    );
    std::fs::write(d.join("bad.jsonl"), text).unwrap();
    assert_eq!(code(d, "validate --trace bad.jsonl --out v.json"), Some(2));
    let report = std::fs::read_to_string(d.join("v.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(v["run_id"].is_string(), "{report}");
    assert!(report.contains("range"), "{report}");
}

#[test]
fn commands_leave_inputs_alone_and_log_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, "synth --out t.jsonl --steps 16 --experts 8 --top-k 2"), Some(0));
    let before = std::fs::read(d.join("t.jsonl")).unwrap();
    assert_eq!(code(d, "simulate --trace t.jsonl --capacity 3 --out s.csv"), Some(0));
    assert_eq!(code(d, "metrics --trace t.jsonl --out m.json"), Some(0));
    assert_eq!(std::fs::read(d.join("t.jsonl")).unwrap(), before);
    let manifest = std::fs::read_to_string(d.join("manifest.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1]["subcommand"], "simulate");
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m["run_id"], lines[2]["run_id"]);
}
