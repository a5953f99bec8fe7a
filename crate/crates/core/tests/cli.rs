//! End-to-end runs of the `ffoc` binary on a synthetic data file.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ffoc::data::{synthetic_banknote, write_banknote};
use ffoc::experiments::{read_results, RESULTS_HEADER};
use ffoc::model::TrainedModel;

fn ffoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffoc"))
        .args(args)
        .env_remove("FFOC_BANKNOTE")
        .env_remove("FFOC_OUTPUT_DIR")
        .output()
        .expect("spawn ffoc")
}

fn ok(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or(serde_json::Value::Null)
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("banknote.txt");
    write_banknote(&data, &synthetic_banknote(11)).unwrap();
    (dir, data)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_landscape_round_trip() {
    let (dir, data) = setup();
    let out = dir.path().join("out");
    let v = ok(&ffoc(&[
        "--data", s(&data), "--out", s(&out), "train", "--loss", "ls_svdd", "--arch", "4,6,6", "--regime", "bp", "--seed", "3",
        "--epochs", "15",
    ]));
    let run = PathBuf::from(v["output"].as_str().unwrap());
    for f in ["model.json", "report.csv", "metadata.json", "splits/train.idx", "splits/valid.idx", "splits/test.idx"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let model = TrainedModel::load(&run.join("model.json")).unwrap();
    assert_eq!(model.network.architecture, vec![4, 6, 6]);
    let report = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + v["epochs_run"].as_u64().unwrap() as usize);

    let m = ok(&ffoc(&["--data", s(&data), "--out", s(&out), "eval", "--model", s(&run.join("model.json")), "--split", "train"]));
    // the model's own training split respects the flag budget
    let n = m["n"].as_u64().unwrap() as f64;
    assert!(m["flagged_fraction"].as_f64().unwrap() <= 0.05 + 1.0 / n);
    let evals: Vec<_> = std::fs::read_dir(&out).unwrap().filter_map(|e| e.ok()).map(|e| e.file_name()).collect();
    let eval_dir = out.join(evals.iter().find(|n| n.to_string_lossy().starts_with("eval_")).unwrap());
    let scores = std::fs::read_to_string(eval_dir.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + n as usize);

    let l = ok(&ffoc(&[
        "--data", s(&data), "--out", s(&out), "landscape", "--model", s(&run.join("model.json")), "--layer", "1", "--steps", "5",
    ]));
    let csv = PathBuf::from(l["csv"].as_str().unwrap());
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 25);
    assert!(csv.with_extension("json").exists());

    let bad = ffoc(&["--data", s(&data), "--out", s(&out), "landscape", "--model", s(&run.join("model.json")), "--layer", "2"]);
    assert!(!bad.status.success());
}

#[test]
fn grid_resumes_and_summarizes() {
    let (dir, data) = setup();
    let out = dir.path().join("grid");
    let args = [
        "--data", s(&data), "--out", s(&out), "grid", "--losses", "goodness,hb_svdd", "--archs", "4,5,5", "--regimes", "ff,bp",
        "--seeds", "1-2", "--epochs", "10", "--workers", "1",
    ];
    let first = ffoc(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let results = out.join("results.csv");
    let text = std::fs::read_to_string(&results).unwrap();
    assert_eq!(text.lines().next(), Some(RESULTS_HEADER));
    assert_eq!(read_results(&results).unwrap().len(), 8);
    for ext in ["csv", "md", "tex"] {
        assert!(out.join(format!("summary.{ext}")).exists());
    }

    // a rerun over a complete file changes nothing
    ok(&ffoc(&args));
    assert_eq!(std::fs::read_to_string(&results).unwrap(), text);

    let sum = ffoc(&["--out", s(&out), "summarize", "--format", "latex"]);
    assert!(sum.status.success());
    assert!(String::from_utf8_lossy(&sum.stdout).contains("\\begin{tabular}"));
}

#[test]
fn config_file_and_errors() {
    let (dir, data) = setup();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochs_max": 5, "regime": "bp"}, "architecture": [4, 3]}"#).unwrap();
    let out = dir.path().join("o");
    let v = ok(&ffoc(&["--config", s(&cfg), "--data", s(&data), "--out", s(&out), "train"]));
    assert!(v["epochs_run"].as_u64().unwrap() <= 5);
    assert!(v["output"].as_str().unwrap().contains("4-3_bp"));

    std::fs::write(&cfg, r#"{"train": {"epoch_max": 5}}"#).unwrap();
    assert!(!ffoc(&["--config", s(&cfg), "--data", s(&data), "--out", s(&out), "train"]).status.success());
    let missing = dir.path().join("absent.txt");
    let e = ffoc(&["--data", s(&missing), "--out", s(&out), "train"]);
    assert!(!e.status.success());
    assert!(String::from_utf8_lossy(&e.stderr).contains("absent.txt"));
}
