use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL_TASK: [&str; 4] = ["--source-per-class", "12", "--target-per-class", "12"];
const SMALL_RUN: [&str; 10] =
    ["--pre-iters", "5", "--epochs", "2", "--iters-per-epoch", "3", "--hidden", "8", "--batch-size", "16"];

fn osda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osda")).args(args).env_remove("OSDA_OUT_DIR").output().expect("spawn osda")
}

fn ok(args: &[&str]) -> Value {
    let out = osda(args);
    assert!(out.status.success(), "osda {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn fails(args: &[&str]) -> String {
    let out = osda(args);
    assert!(!out.status.success(), "osda {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, name: &str, common: usize, total: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    let (c, t, sd) = (common.to_string(), total.to_string(), seed.to_string());
    let mut args = vec!["generate", "--common", &c, "--total", &t, "--seed", &sd, "-o", s(&path)];
    args.extend(SMALL_TASK);
    ok(&args);
    path
}

fn train(task: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["train", "--task", s(task), "--seed", "1", "-o", s(out)];
    args.extend(SMALL_RUN);
    args.extend(extra);
    ok(&args)
}

#[test]
fn generate_records_openness() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let v = ok(&["generate", "--common", "3", "--total", "6", "--seed", "0", "-o", s(&path)]);
    assert_eq!(v["openness"].as_f64(), Some(0.5));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
    assert_eq!(manifest["openness"].as_f64(), Some(0.5));
    assert_eq!(manifest["n_common"], 3);
    assert_eq!(manifest["n_total"], 6);
}

#[test]
fn generate_rejects_closed_set() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&["generate", "--common", "4", "--total", "4", "--seed", "0", "-o", s(&dir.path().join("t.csv"))]);
    assert!(err.contains("--common"), "{err}");
}

#[test]
fn generate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.csv", 3, 5, 7);
    let b = generate(dir.path(), "b.csv", 3, 5, 7);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn train_then_eval_reproduces_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let task = generate(dir.path(), "t.csv", 3, 5, 2);
    let run = dir.path().join("run");
    let trained = train(&task, &run, &[]);
    for name in ["manifest.json", "train_log.jsonl", "threshold.csv", "model.ckpt", "audit/epoch_001.csv"] {
        assert!(run.join(name).is_file(), "missing {name}");
    }
    let eval = ok(&["eval", "--task", s(&task), "--run", s(&run)]);
    assert_eq!(eval, trained["summary"]["eval"]);
    let last = fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().last().unwrap().to_owned();
    let last: Value = serde_json::from_str(&last).unwrap();
    assert_eq!(last["record"], "summary");
    assert_eq!(last["eval"], eval);
}

#[test]
fn invalid_lambda1_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let task = generate(dir.path(), "t.csv", 2, 3, 0);
    let run = dir.path().join("run");
    let err = fails(&["train", "--task", s(&task), "--seed", "0", "-o", s(&run), "--lambda1", "0.4"]);
    assert!(err.contains("lambda"), "{err}");
    assert!(!run.join("model.ckpt").exists());
}

#[test]
fn no_mixup_leaves_lambda2_empty() {
    let dir = tempfile::tempdir().unwrap();
    let task = generate(dir.path(), "t.csv", 3, 5, 4);
    let run = dir.path().join("run");
    train(&task, &run, &["--no-mixup"]);
    let mut rdr = csv::Reader::from_path(run.join("audit/epoch_002.csv")).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == "lambda2").unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        assert!(rec[col].is_empty() || rec[col].parse::<f64>().unwrap() == 0.0, "lambda2 = {}", &rec[col]);
        rows += 1;
    }
    assert_eq!(rows, 5 * 12);
}

#[test]
fn checkpoint_must_match_task() {
    let dir = tempfile::tempdir().unwrap();
    let small = generate(dir.path(), "small.csv", 3, 5, 0);
    let large = generate(dir.path(), "large.csv", 5, 7, 0);
    let run = dir.path().join("run");
    train(&small, &run, &["--no-audit"]);
    assert!(!run.join("audit").exists());
    let ckpt = run.join("model.ckpt");
    let err = fails(&["eval", "--task", s(&large), "--checkpoint", s(&ckpt), "--seed", "1"]);
    assert!(err.contains("does not fit"), "{err}");
    let err = fails(&["eval", "--task", s(&small), "--checkpoint", s(&ckpt)]);
    assert!(err.contains("--seed"), "{err}");
}

#[test]
fn manual_threshold_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let task = generate(dir.path(), "t.csv", 3, 5, 5);
    let run = dir.path().join("run");
    train(&task, &run, &["--no-audit"]);
    let out = dir.path().join("eval.json");
    let eval = ok(&["eval", "--task", s(&task), "--run", s(&run), "--manual-h", "0.7", "-o", s(&out)]);
    assert_eq!(eval["h"].as_f64(), Some(0.7));
    assert_eq!(eval["manual_h"], true);
    let saved: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(saved, eval);
    fails(&["eval", "--task", s(&task), "--run", s(&run), "--manual-h", "1.5"]);
}

#[test]
fn sweep_writes_cells_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let mut args = vec!["sweep", "--pairs", "2:3,2:4,3:5", "--seeds", "0,1,2", "-o", s(&out)];
    args.extend(SMALL_TASK);
    args.extend(SMALL_RUN);
    let v = ok(&args);
    assert_eq!(v["cells"], 9);
    assert_eq!(v["failed"], 0);
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let kinds: Vec<String> = rdr.records().map(|r| r.unwrap()[0].to_owned()).collect();
    assert_eq!(kinds.iter().filter(|k| *k == "cell").count(), 9);
    assert_eq!(kinds.iter().filter(|k| *k == "mean").count(), 3);
}

#[test]
fn sweep_without_pairs_is_a_usage_error() {
    let out = osda(&["sweep"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn table_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = generate(dir.path(), "t.csv", 2, 4, 3);
    let task = osda_lab::table::load_feature_table(&path, Default::default()).unwrap();
    let again = dir.path().join("again.csv");
    osda_lab::table::save_task(&task, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    let back = osda_lab::table::load_feature_table(&again, Default::default()).unwrap();
    assert_eq!(back.source_x, task.source_x);
    assert_eq!(back.target_x, task.target_x);
}
