use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lifelong_edit::checkpoint::{parameter_bytes, Checkpoint};

const TINY: &str = r#"
[data]
n_base_facts = 48
n_edit_facts = 24
seed = 3

[model]
embed_dim = 16
mlp_hidden = 24
max_seq_len = 16

[pretrain]
steps = 60
step_size = 0.05
batch_size = 8
seed = 1

[editor]
eta = 0.002
modules = "0.mlp_out,1.mlp_in,1.mlp_out"
turn_size = 4
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lifelong-edit"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// gen-data + pretrain into `dir`; returns (config, data dir, checkpoint).
fn prepare(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    let ckpt = dir.join("pre.ckpt");
    run(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    run(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    (cfg, data, ckpt)
}

fn full_pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    let (cfg, data, pre) = prepare(dir);
    let post = dir.join("post.ckpt");
    let report = dir.join("report.jsonl");
    let records = data.join("records.jsonl");
    run(&[
        "edit", "--config", s(&cfg), "--checkpoint", s(&pre), "--records", s(&records), "--out", s(&post),
        "--report", s(&report),
    ]);
    run(&[
        "eval", "--checkpoint", s(&post), "--reference", s(&pre), "--records", s(&records), "--base",
        s(&data.join("base.jsonl")), "--report", s(&report),
    ]);
    (std::fs::read(&post).unwrap(), std::fs::read(&report).unwrap())
}

#[test]
fn pipeline_is_reproducible_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ckpt_a, report_a) = full_pipeline(a.path());
    let (ckpt_b, report_b) = full_pipeline(b.path());
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(report_a, report_b);

    let text = String::from_utf8(report_a).unwrap();
    let kinds: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(kinds.iter().filter(|k| *k == "turn").count(), 6);
    assert_eq!(kinds.last().unwrap(), "eval");
}

#[test]
fn zero_eta_leaves_parameter_block_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, pre) = prepare(dir.path());
    let post = dir.path().join("post.ckpt");
    run(&[
        "edit", "--config", s(&cfg), "--checkpoint", s(&pre), "--records", s(&data.join("records.jsonl")),
        "--out", s(&post), "--eta", "0",
    ]);
    let before = Checkpoint::load(&pre).unwrap();
    let after = Checkpoint::load(&post).unwrap();
    assert_eq!(parameter_bytes(&before.params), parameter_bytes(&after.params));
    assert_eq!(after.session.unwrap().state.turn_index, 6);
}

#[test]
fn interrupted_then_resumed_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, pre) = prepare(dir.path());
    let records = data.join("records.jsonl");
    let whole = dir.path().join("whole.ckpt");
    let part = dir.path().join("part.ckpt");
    let resumed = dir.path().join("resumed.ckpt");
    run(&["edit", "--config", s(&cfg), "--checkpoint", s(&pre), "--records", s(&records), "--out", s(&whole)]);
    run(&[
        "edit", "--config", s(&cfg), "--checkpoint", s(&pre), "--records", s(&records), "--out", s(&part),
        "--max-turns", "2",
    ]);
    assert_ne!(std::fs::read(&part).unwrap(), std::fs::read(&whole).unwrap());
    run(&["edit", "--checkpoint", s(&part), "--records", s(&records), "--out", s(&resumed), "--resume"]);
    assert_eq!(std::fs::read(&resumed).unwrap(), std::fs::read(&whole).unwrap());
}

#[test]
fn inspect_stats_reports_every_module() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, pre) = prepare(dir.path());
    let post = dir.path().join("post.ckpt");
    run(&[
        "edit", "--config", s(&cfg), "--checkpoint", s(&pre), "--records", s(&data.join("records.jsonl")),
        "--out", s(&post), "--max-turns", "1",
    ]);
    let out = run(&["inspect-stats", "--checkpoint", s(&post)]);
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    for l in &lines[..3] {
        assert!(l["count"].as_u64().unwrap() > 0);
        assert!(l["mean_sigma"].as_f64().unwrap() > 0.0);
    }
    assert!(lines[3]["state_bytes"].as_u64().unwrap() > 0);
}

fn expect_error(args: &[&str], kind: &str) {
    let out = bin().args(args).output().unwrap();
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(v["kind"], "error");
    assert_eq!(v["error"], kind, "{stderr}");
}

#[test]
fn failures_emit_one_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    expect_error(&["edit", "--checkpoint", s(&missing), "--records", "x", "--out", "y"], "io");
    expect_error(&["edit", "--no-such-flag"], "usage");

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    expect_error(&["inspect-stats", "--checkpoint", s(&garbage)], "checkpoint");

    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[model]\nwidth = 3\n").unwrap();
    expect_error(&["gen-data", "--config", s(&bad_cfg), "--out", s(dir.path())], "config");

    let (cfg, data, pre) = prepare(dir.path());
    let records = data.join("records.jsonl");
    expect_error(
        &["edit", "--config", s(&cfg), "--checkpoint", s(&pre), "--records", s(&records), "--out", "o", "--modules", "9.mlp_in"],
        "config",
    );
    expect_error(&["edit", "--checkpoint", s(&pre), "--records", s(&records), "--out", "o", "--resume"], "other");
}
