// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data.synth]
num_users = 30
num_items = 24

[model]
width = 16
heads = 2
mlp_width = 32

[train]
epochs = 2

[unlearn]
steps = 3
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_circuit-unlearn"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("run"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join("run").join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn full_run_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(run(d, &["--seed", "7", "train", "--synth"]));
    let first = read(d, "model.ckpt");
    ok(run(d, &["--seed", "7", "train", "--synth"]));
    assert_eq!(first, read(d, "model.ckpt"), "same seed must give the same checkpoint");
    let echoed = String::from_utf8(read(d, "config.toml")).unwrap();
    assert!(echoed.contains("seed = 7") && echoed.contains("omega_r = 0.6"));

    ok(run(d, &["--seed", "7", "circuits", "--set", "forget", "--circuit-fraction", "1.0"]));
    let dump: serde_json::Value = serde_json::from_slice(&read(d, "circuit-forget.json")).unwrap();
    let scores: serde_json::Value = serde_json::from_slice(&read(d, "scores-forget.json")).unwrap();
    assert_eq!(dump["edges"].as_array().unwrap().len(), scores["scores"].as_object().unwrap().len());
    let before = read(d, "circuit-forget.json");
    ok(run(d, &["--seed", "7", "circuits", "--set", "forget", "--circuit-fraction", "1.0"]));
    assert_eq!(before, read(d, "circuit-forget.json"));
    ok(run(d, &["--seed", "7", "circuits", "--set", "retain"]));

    ok(run(d, &["--seed", "7", "unlearn", "--method", "cure"]));
    let trace = String::from_utf8(read(d, "trace-cure.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "step,L_F,L_R,L,A_f,A_r,cos_psi,conflict_flag,wall_ms");
    assert_eq!(trace.lines().count(), 4);
    ok(run(d, &["--seed", "7", "unlearn", "--method", "uniform"]));

    let out = ok(run(d, &["--seed", "7", "eval"]));
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        for key in ["label", "auc", "acc", "logloss", "jsd_forget", "unlearn_wall_seconds", "conflict_rate", "config"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
    }
    let csv = String::from_utf8(read(d, "runs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let oracle = d.join("run").join("oracle.ckpt");
    let out = ok(run(d, &["--seed", "7", "eval", oracle.to_str().unwrap()]));
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reports[0]["jsd_forget"].as_f64(), Some(0.0));

    let out = ok(run(d, &["--seed", "7", "report"]));
    let listed = String::from_utf8(out.stdout).unwrap();
    for f in ["alignment-cure.svg", "alignment-uniform.svg", "conflicts.svg", "summary.md"] {
        assert!(listed.contains(f), "{f} not written");
    }
}

#[test]
fn zero_step_unlearning_copies_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(run(d, &["train", "--synth"]));
    ok(run(d, &["circuits", "--set", "forget"]));
    ok(run(d, &["circuits", "--set", "retain"]));
    ok(run(d, &["-D", "unlearn.steps=0", "unlearn"]));
    assert_eq!(read(d, "model.ckpt"), read(d, "unlearned-cure.ckpt"));
}

#[test]
fn patching_logs_candidate_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(run(d, &["train", "--synth"]));
    let out = ok(run(d, &["-D", "attribution.method=patching", "circuits", "--set", "forget"]));
    let log = String::from_utf8_lossy(&out.stderr);
    let line = log.lines().find(|l| l.contains("corrupt prompts: {")).expect("statistics logged");
    let stats: serde_json::Value = serde_json::from_str(&line[line.find('{').unwrap()..]).unwrap();
    assert!(stats["max_evaluated"].as_u64().unwrap() <= 30);
}

#[test]
fn missing_tsv_path_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["-D", "data.source=tsv", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.path"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["-D", "unlearn.omega=0.5", "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_without_trace_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["report"]);
    assert_eq!(out.status.code(), Some(5));
    std::fs::write(tmp.path().join("run").join("trace-cure.csv"), "step,L_F,L_R,L,A_f,A_r,cos_psi,conflict_flag,wall_ms\n")
        .unwrap();
    let out = run(tmp.path(), &["report"]);
    assert_eq!(out.status.code(), Some(5));
}
