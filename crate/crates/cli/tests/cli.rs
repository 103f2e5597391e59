use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{
  "synth": {"members": 12, "nonmembers": 18},
  "holdout": {"prefix_pool": 3, "reference_pool": 3},
  "model": {"hidden": 16, "layers": 1, "heads": 2, "intermediate": 32, "max_seq": 48},
  "teacher": {"epochs": 3, "batch_size": 4, "learning_rate": 0.003},
  "distill": {"train": {"epochs": 2, "batch_size": 4, "learning_rate": 0.003}},
  "variants": ["none", "nonvulnerable", "all"],
  "attacks": {"folds": 2, "k_grid": [0.2, 0.5, 1.0], "prefix_grid": [1, 2]},
  "seed": 5
}"#;

fn kdmia(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdmia"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn ok(dir: &Path, args: &[&str]) {
    let o = kdmia(dir, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
}

#[test]
fn prepare_data_is_deterministic() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["--config", "small.json", "--out", "a", "prepare-data"]);
    ok(p, &["--config", "small.json", "--out", "b", "prepare-data"]);
    assert_eq!(
        fs::read(p.join("a/manifest.json")).unwrap(),
        fs::read(p.join("b/manifest.json")).unwrap()
    );
}

#[test]
fn prepare_data_from_file() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["--config", "small.json", "generate-corpus", "--file", "c.jsonl"]);
    ok(p, &["--config", "small.json", "--out", "r", "prepare-data", "--in", "c.jsonl"]);
    assert_eq!(
        fs::read(p.join("c.jsonl")).unwrap(),
        fs::read(p.join("r/corpus.jsonl")).unwrap()
    );
}

#[test]
fn duplicate_id_across_splits_exits_2() {
    let dir = setup();
    let p = dir.path();
    let jsonl = [
        r#"{"id":"a","text":"one two three","split":"member"}"#,
        r#"{"id":"b","text":"four five six","split":"member"}"#,
        r#"{"id":"a","text":"seven eight","split":"nonmember"}"#,
    ]
    .join("\n");
    fs::write(p.join("dup.jsonl"), jsonl).unwrap();
    let o = kdmia(p, &["--config", "small.json", "--out", "r", "prepare-data", "--in", "dup.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("\"a\"") || stderr(&o).contains(" a"), "{}", stderr(&o));
}

#[test]
fn staged_commands() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["--config", "small.json", "--out", "r", "prepare-data"]);

    let o = kdmia(p, &["--out", "r", "distill", "--variant", "none"]);
    assert_eq!(code(&o), 2, "distill before the teacher exists");

    ok(p, &["--out", "r", "train-teacher"]);

    let o = kdmia(p, &["--out", "r", "distill", "--variant", "nonvulnerable"]);
    assert_eq!(code(&o), 2, "nonvulnerable without a partition");
    assert!(stderr(&o).contains("partition"));

    ok(p, &["--out", "r", "attack", "--model", "teacher", "--methods", "loss,zlib"]);
    let mut scores: Vec<String> = fs::read_dir(p.join("r/attacks/teacher"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with("_scores.csv"))
        .collect();
    scores.sort();
    assert_eq!(scores, ["loss_scores.csv", "zlib_scores.csv"]);

    let metrics = fs::read(p.join("r/attacks/teacher/metrics.json")).unwrap();
    ok(p, &["--out", "r", "attack", "--model", "teacher", "--methods", "loss,zlib"]);
    assert_eq!(metrics, fs::read(p.join("r/attacks/teacher/metrics.json")).unwrap());

    let o = kdmia(p, &["--out", "r", "attack", "--model", "teacher", "--methods", "loss,nope"]);
    assert_eq!(code(&o), 2);

    ok(p, &["--out", "r", "partition"]);
    assert!(p.join("r/partition.json").exists());
    assert!(p.join("r/alignment/vulnerable.csv").exists());

    ok(p, &["--out", "r", "distill", "--variant", "all", "--bottleneck-dim", "6"]);
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("r/models/student-all/run.json")).unwrap()).unwrap();
    assert_eq!(run["model"]["bottleneck"], 6);
    assert_eq!(run["model"]["norm"], "nonorm");

    ok(p, &["--out", "r", "attack", "--model", "all", "--methods", "loss,zlib"]);
    ok(p, &["--out", "r", "report"]);
    assert!(p.join("r/report/report.md").exists());
}

#[test]
fn report_errors_on_empty_runs_dir() {
    let dir = setup();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let o = kdmia(dir.path(), &["report", "--runs", "empty"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn self_check_passes_without_models() {
    let dir = tempfile::tempdir().unwrap();
    let o = kdmia(dir.path(), &["report", "--self-check"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().count() >= 8);
    assert!(!out.contains("FAIL"));
}

#[test]
fn config_without_variants_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"seed": 1}"#).unwrap();
    let o = kdmia(dir.path(), &["--config", "c.json", "--out", "r", "run-all"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("variants"));
}

#[test]
fn run_all_twice_gives_identical_summaries() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["--config", "small.json", "--out", "a", "run-all"]);
    ok(p, &["--config", "small.json", "--out", "b", "run-all", "--jobs", "1"]);
    assert_eq!(
        fs::read(p.join("a/summary.json")).unwrap(),
        fs::read(p.join("b/summary.json")).unwrap()
    );
    let o = kdmia(p, &["--config", "small.json", "--out", "c", "--seed", "6", "run-all"]);
    assert_eq!(code(&o), 0);
    assert_ne!(
        fs::read(p.join("a/summary.json")).unwrap(),
        fs::read(p.join("c/summary.json")).unwrap()
    );
}

#[test]
fn ablation_honors_dims() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["--config", "small.json", "--out", "r", "ablate-bottleneck", "--dims", "4,12"]);
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("r/ablation/ablation.json")).unwrap()).unwrap();
    let dims: Vec<u64> = rows.as_array().unwrap().iter().map(|r| r["bottleneck"].as_u64().unwrap()).collect();
    assert_eq!(dims, [4, 12]);
    assert!(p.join("r/models/bottleneck-12/model.ckpt").exists());
}
