use std::path::Path;
use std::process::{Command, Output};

fn dire(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dire")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_small(dir: &Path) {
    let out = dire(&["gen-data", "--out", s(dir), "--train", "30", "--val", "10", "--test", "12", "--seed", "3", "--debug"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_train_eval_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "config.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let ckpt = tmp.path().join("dire.ckpt");
    let log = tmp.path().join("log.csv");
    let out = dire(&[
        "train", "--model", "dire-1m", "--data", s(&data), "--out", s(&ckpt), "--log", s(&log), "--epochs", "2", "--dim", "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("resolved config"));
    let csv = std::fs::read_to_string(&log).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,train_loss,val_acc,seconds");
    assert_eq!(csv.lines().count(), 3);

    let report = tmp.path().join("report.json");
    let out = dire(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report), "--errors"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["eval"]["n"], 12);
    let e = &r["errors"];
    assert_eq!(
        e["wrong_category"].as_u64().unwrap() + e["wrong_attribute"].as_u64().unwrap(),
        e["errors"].as_u64().unwrap()
    );

    let test = data.join("test.jsonl");
    let out = dire(&["inspect", "--ckpt", s(&ckpt), "--data", s(&test), "--index", "4"]);
    assert!(out.status.success());
    let d: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(d["p_old"].as_array().unwrap().len(), 11);
    assert_eq!(d["row_norms"].as_array().unwrap().len(), 12);
    let g: f64 = d["attention"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((g - 1.0).abs() < 1e-12);

    let out = dire(&["inspect", "--ckpt", s(&ckpt), "--data", s(&test), "--index", "12"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn suite_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let table = tmp.path().join("t.csv");
    let out = dire(&[
        "suite", "--models", "ff,dire-1m", "--data", s(&data), "--out", s(&table), "--epochs", "1", "--dim", "8", "--hidden", "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&table).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["random", "ff", "dire-1m"]);
}

#[test]
fn grad_check_reports_pass_and_fail() {
    let out = dire(&["grad-check", "--model", "memn-2m-2h", "--trials", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    // An impossible tolerance must fail with the assertion exit code.
    let out = dire(&["grad-check", "--model", "dire-1m", "--trials", "1", "--tol", "1e-30"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(dire(&["train", "--model", "lstm", "--data", "x", "--out", "y"]).status.code(), Some(2));
    assert_eq!(dire(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dire(&["grad-check", "--model", "ff", "--trials", "0"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, "{\"bogus\": 1}").unwrap();
    let out = dire(&["gen-data", "--out", s(&tmp.path().join("d")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dire(&["eval", "--ckpt", s(&tmp.path().join("none.ckpt")), "--data", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}
