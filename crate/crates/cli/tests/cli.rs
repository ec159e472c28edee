use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn evolvex(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evolvex"))
        .args(args)
        .current_dir(dir)
        .env_remove("EVOLVEX_CONFIG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = evolvex(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

fn trained(dir: &Path) {
    ok(dir, &["generate", "--seed", "1"]);
    ok(dir, &["train", "-d", "dataset.json", "--epochs", "20"]);
}

#[test]
fn generate_train_eval_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["generate", "--users", "16", "--seed", "2"]);
    assert!(stdout.contains("users 16"));
    let ds = json(dir.path(), "dataset.json");
    assert_eq!(ds["held_out"].as_array().unwrap().len(), 4);
    ok(dir.path(), &["train", "-d", "dataset.json", "--epochs", "15"]);
    let trace = json(dir.path(), "checkpoint.loss.json");
    assert_eq!(trace["epochs"].as_array().unwrap().len(), 15);
    ok(dir.path(), &["eval", "-d", "dataset.json", "-c", "checkpoint.json"]);
    let report = json(dir.path(), "report.json");
    assert_eq!(report["strategy"], "crossmodal");
    assert!(report["perplexity"].as_f64().unwrap() >= 1.0);
    assert_eq!(report["stages"].as_array().unwrap().len(), 4);
}

#[test]
fn each_strategy_is_recorded_in_its_report() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--users", "10"]);
    let mut seen = Vec::new();
    for s in ["concat", "attention", "crossmodal"] {
        let ckpt = format!("{s}.json");
        let report = format!("{s}-report.json");
        ok(dir.path(), &["train", "-d", "dataset.json", "--strategy", s, "--epochs", "5", "-o", &ckpt]);
        ok(dir.path(), &["eval", "-d", "dataset.json", "-c", &ckpt, "-o", &report]);
        seen.push(json(dir.path(), &report)["strategy"].as_str().unwrap().to_string());
    }
    assert_eq!(seen, ["concat", "attention", "crossmodal"]);
}

#[test]
fn forecast_has_one_entry_per_stage() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    ok(dir.path(), &["forecast", "-d", "dataset.json", "-c", "checkpoint.json", "--horizon", "4"]);
    let f = json(dir.path(), "forecast.json");
    let stages = f["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 4);
    ok(dir.path(), &["forecast", "-d", "dataset.json", "-c", "checkpoint.json", "--horizon", "2", "-o", "two.json"]);
    assert_eq!(json(dir.path(), "two.json")["stages"].as_array().unwrap().len(), 2);
}

#[test]
fn stub_prompt_sweep_parses_everything() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--users", "12", "--seed", "5"]);
    ok(dir.path(), &["prompt", "-d", "dataset.json"]);
    assert_eq!(json(dir.path(), "llm-report.json")["parse_failures"], 0);
    let prompt = ok(dir.path(), &["prompt", "-d", "dataset.json", "--user", "3", "--stage", "2"]);
    for heading in ["## Role", "## Task", "## Context", "### User Graph", "## Instructions"] {
        assert!(prompt.contains(heading), "missing {heading}");
    }
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(evolvex(dir.path(), &["generate", "--steps", "2"]).status.code(), Some(2));
    assert_eq!(evolvex(dir.path(), &["train", "-d", "x.json", "--strategy", "bogus"]).status.code(), Some(2));
    assert_eq!(evolvex(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(evolvex(dir.path(), &["train", "-d", "missing.json"]).status.code(), Some(1));
    trained(dir.path());
    let out = evolvex(dir.path(), &["prompt", "-d", "dataset.json", "--provider", "http"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_for_another_dataset_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    ok(dir.path(), &["generate", "--seed", "9", "-o", "other.json"]);
    let out = evolvex(dir.path(), &["eval", "-d", "other.json", "-c", "checkpoint.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
    std::fs::write(dir.path().join("broken.json"), "{").unwrap();
    assert_eq!(evolvex(dir.path(), &["eval", "-d", "dataset.json", "-c", "broken.json"]).status.code(), Some(1));
}

#[test]
fn config_file_sits_under_the_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("evolvex.json"),
        r#"{"generator": {"users": 9}, "train": {"epochs": 3, "strategy": "concat"}}"#,
    )
    .unwrap();
    ok(dir.path(), &["generate"]);
    assert_eq!(json(dir.path(), "dataset.json")["users"].as_array().unwrap().len(), 9);
    ok(dir.path(), &["generate", "--users", "7", "-o", "seven.json"]);
    assert_eq!(json(dir.path(), "seven.json")["users"].as_array().unwrap().len(), 7);
    ok(dir.path(), &["train", "-d", "dataset.json"]);
    let trace = json(dir.path(), "checkpoint.loss.json");
    assert_eq!(trace["strategy"], "concat");
    assert_eq!(trace["epochs"].as_array().unwrap().len(), 3);
}

#[test]
fn config_from_the_environment_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("elsewhere.json");
    std::fs::write(&cfg, r#"{"generator": {"users": 6}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_evolvex"))
        .args(["generate"])
        .current_dir(dir.path())
        .env("EVOLVEX_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(json(dir.path(), "dataset.json")["users"].as_array().unwrap().len(), 6);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"generator": {"userz": 6}}"#).unwrap();
    let out = evolvex(dir.path(), &["--config", bad.to_str().unwrap(), "generate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("userz"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        trained(dir);
        ok(dir, &["eval", "-d", "dataset.json", "-c", "checkpoint.json"]);
        ok(dir, &["forecast", "-d", "dataset.json", "-c", "checkpoint.json"]);
    }
    for name in ["dataset.json", "checkpoint.json", "report.json", "forecast.json"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}
