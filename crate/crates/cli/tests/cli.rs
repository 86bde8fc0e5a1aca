use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mcqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcqa")).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "# tiny encoder for fast tests\nd_model = 16\nn_layers = 1\nn_heads = 2\nd_ff = 32\nmax_len = 64\nepochs = 2\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn cost_reports_every_scheme() {
    let v = json(&mcqa(&["cost", "--question-len", "48", "--answer-lens", "8,8,8,8,8"]));
    assert_eq!(v["command"], "cost");
    assert!(v["environment"]["os"].is_string());
    let tokens: Vec<u64> = v["metrics"].as_array().unwrap().iter().map(|c| c["total_tokens"].as_u64().unwrap()).collect();
    assert_eq!(tokens[0], 300);
    assert_eq!(tokens[2], 96);
}

#[test]
fn synth_train_eval_pilot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let cfg = small_config(d);
    json(&mcqa(&[
        "synth", "--dir", data.to_str().unwrap(), "--train", "40", "--dev", "10", "--test", "10", "--answers", "3",
    ]));
    let train = data.join("train.jsonl");
    let dev = data.join("dev.jsonl");
    let test = data.join("test.jsonl");
    let ckpt = d.join("m.ckpt");
    let report = json(&mcqa(&[
        "train",
        "--data",
        train.to_str().unwrap(),
        "--dev",
        dev.to_str().unwrap(),
        "--config",
        &cfg,
        "--test",
        test.to_str().unwrap(),
        "--seed",
        "3",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]));
    assert_eq!(report["config"]["train"]["seed"], 3);
    assert_eq!(report["metrics"]["history"].as_array().unwrap().len(), 2);
    let trained_test = report["metrics"]["test_accuracy"].as_f64().unwrap();
    let eval = json(&mcqa(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", test.to_str().unwrap()]));
    assert_eq!(eval["metrics"]["instances"], 10);
    let acc = eval["metrics"]["accuracy"].as_f64().unwrap();
    assert_eq!(acc, trained_test);
    let report_path = d.join("pilot.json");
    let pilot_out = mcqa(&[
        "pilot",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
        "--k-max",
        "2",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(pilot_out.status.success() && pilot_out.stdout.is_empty());
    let pilot: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let curve = pilot["metrics"]["curve"].as_array().unwrap();
    assert_eq!(curve.len(), 3);
    assert_eq!(curve[0]["accuracy"].as_f64().unwrap(), acc);
}

#[test]
fn gate_requires_single_pass_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = mcqa(&["gradcheck", "--scheme", "1anp", "--gate", "on", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let ok = json(&mcqa(&[
        "gradcheck", "--scheme", "na1p", "--gate", "on", "--config", &cfg, "--samples", "40",
    ]));
    assert!(ok["metrics"]["max_relative_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn bench_compares_all_schemes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let v = json(&mcqa(&[
        "bench", "--config", &cfg, "--instances", "5", "--repetitions", "1", "--question-len", "12", "--answer-len", "3",
    ]));
    let reports = v["metrics"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports[2]["max_batch"].as_u64() > reports[0]["max_batch"].as_u64());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "d_model = 16\nwidth = 3\n").unwrap();
    let out = mcqa(&["cost", "--question-len", "4", "--answer-lens", "2,2", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert!(!mcqa(&["train", "--scheme", "bogus"]).status.success());
    let missing = mcqa(&["eval", "--checkpoint", "/nonexistent/x", "--data", "/nonexistent/y"]);
    assert!(!missing.status.success());
}
