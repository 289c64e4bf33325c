use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rewardrank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["gen-data", "--out", s(dir), "--tasks", "4", "--variants", "--episodes", "40", "--seed", "7"]);
    }
    let files = tree(&a);
    assert!(files.iter().any(|(n, _)| n == "manifest.json"));
    assert_eq!(files, tree(&b));
}

#[test]
fn invalid_episode_count_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--out", s(&tmp.path().join("d")), "--episodes", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["gen-data", "--out", s(&data), "--tasks", "1", "--episodes", "3"]);
    let out = run(&["eval", "--data", s(&data), "--checkpoint", s(&tmp.path().join("absent.rwdm"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.rwdm"));
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.json");
    fs::write(&cfg, r#"{"schema_version": 1, "params": {"tasks": 1, "episodes": 2}}"#).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&b), "--episodes", "3"]);
    let count = |d: &Path| fs::read_dir(d).unwrap().count();
    assert!(count(&b) > count(&a));
    fs::write(&cfg, r#"{"schema_version": 1, "params": {"no_such_field": 1}}"#).unwrap();
    let out = run(&["gen-data", "--config", s(&cfg), "--out", s(&tmp.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_calibrate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    ok(&["gen-data", "--out", s(&data), "--tasks", "2", "--episodes", "9"]);
    ok(&[
        "--threads", "2", "train", "--data", s(&data), "--out", s(&run_dir), "--epochs", "3", "--pairs-per-epoch", "256",
    ]);
    let log = fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ckpt = run_dir.join("model.rwdm");
    assert!(ckpt.exists());

    let oracle = ok(&["eval", "--data", s(&data), "--oracle-scores", "--pairs-per-task", "300"]);
    let report: serde_json::Value = serde_json::from_slice(&oracle.stdout).unwrap();
    assert_eq!(report["best_of"]["overall"], 1.0);

    let report_path = tmp.path().join("cal.json");
    ok(&[
        "calibrate", "--data", s(&data), "--checkpoint", s(&ckpt), "--variant", "temperature", "--out", s(&report_path),
        "--pairs-per-task", "300",
    ]);
    let cal: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(cal.get("temperature").is_some());
    assert!(cal.get("isotonic").is_none());
    assert!(run_dir.join("model.temperature.json").exists());
    assert!(!run_dir.join("model.isotonic.json").exists());
}

#[test]
fn shape_demo_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("shape");
    ok(&[
        "shape-demo", "--out", s(&out), "--sizes", "3,4", "--study-size", "4", "--seeds", "2", "--episodes", "30",
        "--random-potentials", "2", "--probes", "2",
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("shaping_report.json")).unwrap()).unwrap();
    assert!(report.is_object());
    assert!(out.join("shaping_summary.txt").exists());
}

#[test]
fn training_does_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--tasks", "2", "--episodes", "9"]);
    let mut checkpoints = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("run{threads}"));
        ok(&[
            "--threads", threads, "train", "--data", s(&data), "--out", s(&out), "--epochs", "2", "--pairs-per-epoch", "256",
        ]);
        checkpoints.push(fs::read(out.join("model.rwdm")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1]);
}
