use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn holdup(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_holdup"))
        .current_dir(dir)
        .args(args)
        .env_remove("HOLDUP_API_KEY")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

/// 60 records over three topics plus the matching labels file.
fn workspace() -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let topics = ["sports", "world", "science"];
    let lines: Vec<String> = (0..60)
        .map(|i| {
            let t = topics[i % 3];
            serde_json::json!({"id": 1000 + i, "text": format!("note {i} on {t}"), "label": t}).to_string()
        })
        .collect();
    let input = dir.path().join("data.jsonl");
    fs::write(&input, lines.join("\n") + "\n").unwrap();
    let labels = dir.path().join("labels.json");
    let defs: Vec<Value> = topics.iter().map(|t| serde_json::json!({"name": t, "description": ""})).collect();
    fs::write(&labels, serde_json::to_string(&defs).unwrap()).unwrap();
    (dir, input, labels)
}

#[test]
fn run_then_eval_round_trip() {
    let (dir, input, labels) = workspace();
    let (input, labels) = (input.to_str().unwrap(), labels.to_str().unwrap());
    let out = holdup(
        dir.path(),
        &["run", "--task", "classification", "--input", input, "--labels", labels, "--seed", "3", "--diagnostics", "diag.json"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let predictions = fs::read_to_string(dir.path().join("predictions.jsonl")).unwrap();
    let lines: Vec<Value> = predictions.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 60);
    assert!(lines.iter().all(|l| l["id"].as_i64().unwrap() >= 1000));

    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 60);
    assert_eq!(report["accuracy"], 1.0);
    assert!(report["cost_total"].as_f64().unwrap() > 0.0);
    assert!(report["budget"].is_null());
    assert!(dir.path().join("diag.json").exists());

    let eval = holdup(
        dir.path(),
        &["eval", "--task", "classification", "--input", input, "--labels", labels, "--predictions", "predictions.jsonl", "--report", "eval.json"],
    );
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let scored: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(scored["accuracy"], 1.0);
}

#[test]
fn budgeted_run_stays_within_budget() {
    let (dir, input, labels) = workspace();
    let out = holdup(
        dir.path(),
        &[
            "run", "--task", "classification", "--input", input.to_str().unwrap(), "--labels",
            labels.to_str().unwrap(), "--budget", "0.004",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["cost_total"].as_f64().unwrap() <= 0.004);
    assert_eq!(report["budget"], 0.004);
}

#[test]
fn clustering_needs_no_labels_file() {
    let (dir, input, _) = workspace();
    let out = holdup(dir.path(), &["run", "--task", "clustering", "--k", "3", "--input", input.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["clustering_accuracy"], 1.0);
    assert_eq!(report["labels"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes_by_category() {
    let (dir, input, labels) = workspace();
    let (input, labels) = (input.to_str().unwrap(), labels.to_str().unwrap());

    let no_labels = holdup(dir.path(), &["run", "--task", "classification", "--input", input]);
    assert_eq!(code(&no_labels), 2);
    assert_eq!(code(&holdup(dir.path(), &["run", "--bogus"])), 2);
    let no_cache = holdup(dir.path(), &["run", "--task", "classification", "--input", input, "--labels", labels, "--oracle", "replay"]);
    assert_eq!(code(&no_cache), 2);

    let missing = holdup(dir.path(), &["run", "--task", "classification", "--input", "nope.jsonl", "--labels", labels]);
    assert_eq!(code(&missing), 3);
    fs::write(dir.path().join("bad.jsonl"), "{\"text\": \"ok\"}\nnot json\n").unwrap();
    let malformed = holdup(dir.path(), &["run", "--task", "classification", "--input", "bad.jsonl", "--labels", labels]);
    assert_eq!(code(&malformed), 3);
    assert!(String::from_utf8_lossy(&malformed.stderr).contains(":2"));

    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let cache = holdup(
        dir.path(),
        &["run", "--task", "classification", "--input", input, "--labels", labels, "--oracle", "replay", "--cache", "empty.jsonl"],
    );
    assert_eq!(code(&cache), 4);

    let broke = holdup(dir.path(), &["run", "--task", "classification", "--input", input, "--labels", labels, "--budget", "0.0000001"]);
    assert_eq!(code(&broke), 5);
    assert!(!dir.path().join("predictions.jsonl").exists());
}

#[test]
fn simulate_writes_one_row_per_method_and_seed() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("sim.json"), r#"{"sim": {"row_error": 0.1}}"#).unwrap();
    let out = holdup(
        dir.path(),
        &["simulate", "--sim-config", "sim.json", "--k", "3", "--n", "60", "--seeds", "2", "--out", "sim.csv"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(dir.path().join("sim.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["method", "seed", "accuracy", "cost_per_1000"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let methods: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(methods, ["holdup", "row_by_row", "holdup", "row_by_row"]);
    for r in &rows {
        let acc: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
