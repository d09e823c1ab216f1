use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fewner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewner")).args(args).output().expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    fewner(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn resolved(args: &[&str]) -> Value {
    let mut all = args.to_vec();
    all.push("config");
    let out = fewner(&all);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["gradcheck", "--points", "many"]), 1);
    assert_eq!(code(&["ingest", "--in", "/nonexistent/markup.txt", "--out", "/tmp/x.jsonl"]), 1);
    assert_eq!(code(&["--config", "/nonexistent.json", "config"]), 1);
    assert_eq!(code(&["--seeds", "0", "config"]), 1);
    assert_eq!(code(&["--n-way", "0", "config"]), 1);
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["experiment", "--help"]), 0);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"n_wya": 3}"#).unwrap();
    let out = fewner(&["--config", p(&cfg), "config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_wya"));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("episodes.jsonl");
    fs::write(&bad, "{not json}\n").unwrap();
    assert_eq!(code(&["llm-baseline", "--episodes", p(&bad), "--responses", p(&bad)]), 2);
}

#[test]
fn llm_baseline_offline_without_fixture_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let eps = dir.path().join("eps");
    assert_eq!(code(&["synth", "--out", p(&data)]), 0);
    assert_eq!(code(&["sample-episodes", "--data", p(&data), "--out", p(&eps)]), 0);
    assert_eq!(code(&["--offline", "llm-baseline", "--episodes", p(&eps.join("test.jsonl"))]), 1);
}

#[test]
fn flags_override_file_override_defaults() {
    let defaults = resolved(&[]);
    assert_eq!(defaults["n_way"], 5);
    assert_eq!(defaults["seeds"].as_array().unwrap().len(), 5);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"n_way": 3, "k_shot": 2, "detector": {"alpha": 0.2}}"#).unwrap();
    let file = resolved(&["--config", p(&cfg)]);
    assert_eq!(file["n_way"], 3);
    assert_eq!(file["k_shot"], 2);
    assert_eq!(file["detector"]["alpha"], 0.2);
    assert_eq!(file["classifier"]["alpha"], defaults["classifier"]["alpha"]);
    assert_eq!(file["detector"]["beta"], defaults["detector"]["beta"]);

    let flags = resolved(&["--config", p(&cfg), "--n-way", "4", "--alpha", "0.3", "--seeds", "9,8,"]);
    assert_eq!(flags["n_way"], 4);
    assert_eq!(flags["k_shot"], 2);
    assert_eq!(flags["detector"]["alpha"], 0.3);
    assert_eq!(flags["classifier"]["alpha"], 0.3);
    assert_eq!(flags["seeds"], serde_json::json!([9, 8]));
}

#[test]
fn frozen_config_matches_resolution() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic-5way-1shot.json");
    let frozen: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(resolved(&["--config", p(&path)]), frozen);
    assert_eq!(frozen["seeds"], serde_json::json!([171]));
}

#[test]
fn experiment_resumes_from_stage_markers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let args = ["--seeds", "1", "--total-steps", "10", "experiment", "--out", p(&out)];
    let first = fewner(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let seed_dir = out.join("seed-171");
    for stage in ["episodes", "pretrain", "detector-steppingstone", "classifier", "evaluate"] {
        assert!(seed_dir.join(format!(".done-{stage}")).exists(), "missing marker for {stage}");
    }
    let report = fs::read(out.join("report.json")).unwrap();
    assert!(out.join("report.txt").exists());
    assert!(out.join("config.json").exists());

    // A finished stage is loaded, not recomputed: a corrupted checkpoint
    // behind a marker surfaces as an error.
    fs::remove_file(seed_dir.join(".done-evaluate")).unwrap();
    fs::remove_file(seed_dir.join("eval.json")).unwrap();
    fs::remove_file(out.join("report.json")).unwrap();
    let ckpt = seed_dir.join("classifier.ckpt");
    let saved = fs::read(&ckpt).unwrap();
    let second = fewner(&args);
    assert!(second.status.success(), "{}", String::from_utf8_lossy(&second.stderr));
    assert!(!String::from_utf8_lossy(&second.stderr).contains("meta-trained detector"));
    assert_eq!(fs::read(out.join("report.json")).unwrap(), report);

    fs::write(&ckpt, b"garbage").unwrap();
    fs::remove_file(seed_dir.join(".done-evaluate")).unwrap();
    assert_eq!(code(&args), 2);
    fs::write(&ckpt, saved).unwrap();
}

#[test]
fn config_change_in_same_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let base = ["--seeds", "1", "--total-steps", "5", "experiment", "--skip-classifier", "--out", p(&out)];
    assert_eq!(code(&base), 0);
    let changed = ["--seeds", "1", "--total-steps", "6", "experiment", "--skip-classifier", "--out", p(&out)];
    let o = fewner(&changed);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different configuration"));
}

#[test]
fn grid_search_writes_scored_points() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid");
    let o = fewner(&[
        "--seeds",
        "1",
        "--total-steps",
        "5",
        "experiment",
        "--skip-classifier",
        "--grid",
        "alpha=0.02,0.05",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid: Value = serde_json::from_str(&fs::read_to_string(out.join("grid/grid.json")).unwrap()).unwrap();
    assert_eq!(grid.as_array().unwrap().len(), 2);
    assert!(out.join("report.json").exists());
}

#[test]
fn ingest_and_pretrain_from_markup() {
    let dir = tempfile::tempdir().unwrap();
    let markup = dir.path().join("wiki.txt");
    fs::write(
        &markup,
        "[[Paris]] is the capital of [[France]].\nNothing linked here.\n\nThe [[Seine|river Seine]] flows.\n",
    )
    .unwrap();
    let data = dir.path().join("pre.jsonl");
    let o = fewner(&["ingest", "--in", p(&markup), "--out", p(&data)]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("2 documents"), "{stdout}");
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 2);
    let ckpt = dir.path().join("ss.ckpt");
    assert_eq!(code(&["pretrain-ssd", "--data", p(&data), "--steps", "5", "--out", p(&ckpt)]), 0);
    assert!(ckpt.exists());
    assert!(dir.path().join("ss.log.jsonl").exists());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    assert_eq!(code(&["gradcheck", "--points", "5", "--out", p(&out)]), 0);
    let r: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert!(r.as_array().unwrap().iter().all(|t| t["passed"] == true));
}
