use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delayformer"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const CONFIG: &str = r#"{
  "model": {"w_in": 12, "horizon": 4, "embed_dim": 5, "p1": 4, "p2": 5,
            "d_model": 8, "n_blocks": 1, "n_heads": 2, "d_ff": 16},
  "train": {"learning_rate": 0.001, "batch_size": 8, "max_epochs": 2, "stride": 2},
  "data": {"csv": "data.csv"},
  "output": "run"
}"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "generate-lorenz",
            "--subsystems",
            "1",
            "--points",
            "300",
            "--out",
            "data.csv",
        ],
    );
    std::fs::write(dir.path().join("config.json"), CONFIG).unwrap();
    dir
}

#[test]
fn full_workflow() {
    let dir = workspace();
    let d = dir.path();
    let data = std::fs::read_to_string(d.join("data.csv")).unwrap();
    assert_eq!(data.lines().next(), Some("x1,y1,z1"));
    assert_eq!(data.lines().count(), 301);

    ok(
        d,
        &["train", "--config", "config.json", "--seed", "3", "--deterministic"],
    );
    for f in ["checkpoint.dlfm", "history.csv", "metrics.json", "config.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(d.join("run/history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_loss,val_loss"));
    assert_eq!(history.lines().count(), 3);
    let metrics = json(&d.join("run/metrics.json"));
    assert_eq!(metrics["deterministic"], true);
    let models: Vec<&str> = metrics["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["model"].as_str().unwrap())
        .collect();
    assert_eq!(models, ["delayformer", "persistence"]);

    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint.dlfm",
            "--data",
            "data.csv",
            "--out",
            "eval.json",
        ],
    );
    let eval = json(&d.join("eval.json"));
    let rows = eval["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2]["model"], "ridge");
    assert!(rows[2]["lambda"].as_f64().unwrap() > 0.0);
    assert!(rows.iter().all(|r| r["mse"].as_f64().unwrap().is_finite()));

    ok(
        d,
        &[
            "predict",
            "--checkpoint",
            "run/checkpoint.dlfm",
            "--window",
            "data.csv",
            "--out",
            "pred.csv",
        ],
    );
    let pred = std::fs::read_to_string(d.join("pred.csv")).unwrap();
    let lines: Vec<&str> = pred.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "x1,y1,z1");
    assert!(lines[1..]
        .iter()
        .all(|l| l.split(',').all(|v| v.parse::<f64>().unwrap().is_finite())));

    let summary = ok(
        d,
        &[
            "finetune",
            "--checkpoint",
            "run/checkpoint.dlfm",
            "--config",
            "config.json",
            "--fraction",
            "0.5",
            "--out",
            "ft.dlfm",
        ],
    );
    let summary: Value = serde_json::from_str(summary.trim()).unwrap();
    assert!(summary["windows_used"].as_u64().unwrap() > 0);
    assert_eq!(summary["heads_reinitialized"], false);
    assert!(d.join("ft.dlfm").exists());

    let two = ok(
        d,
        &[
            "finetune",
            "--checkpoint",
            "run/checkpoint.dlfm",
            "--data",
            "data.csv",
            "--channels",
            "x1,z1",
            "--fraction",
            "0",
            "--out",
            "ft2.dlfm",
        ],
    );
    let two: Value = serde_json::from_str(two.trim()).unwrap();
    assert_eq!(two["heads_reinitialized"], true);
    assert_eq!(two["windows_used"], 0);
}

#[test]
fn seeded_training_reproduces_artifacts() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["train", "--config", "config.json", "--seed", "9", "--out", "a"]);
    ok(d, &["train", "--config", "config.json", "--seed", "9", "--out", "b"]);
    for f in ["checkpoint.dlfm", "history.csv"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    // Only the recorded output directory may differ.
    let (mut a, mut b) = (json(&d.join("a/metrics.json")), json(&d.join("b/metrics.json")));
    a["config"]["output"] = Value::Null;
    b["config"]["output"] = Value::Null;
    assert_eq!(a, b);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out: Value = serde_json::from_str(ok(dir.path(), &["gradcheck", "--samples", "50"]).trim()).unwrap();
    assert_eq!(out["pass"], true);
    assert_eq!(out["checked"], 50);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["train", "--config", "config.json"]);

    let mut bytes = std::fs::read(d.join("run/checkpoint.dlfm")).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(d.join("bad.dlfm"), &bytes).unwrap();
    let out = run(
        d,
        &[
            "predict",
            "--checkpoint",
            "bad.dlfm",
            "--window",
            "data.csv",
            "--out",
            "p.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!d.join("p.csv").exists());

    std::fs::write(d.join("ragged.csv"), "a,b\n1,2\n3\n").unwrap();
    let out = run(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint.dlfm",
            "--data",
            "ragged.csv",
            "--out",
            "e.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 3"));

    std::fs::write(d.join("typo.json"), CONFIG.replace("\"output\"", "\"outptu\"")).unwrap();
    assert_eq!(run(d, &["train", "--config", "typo.json"]).status.code(), Some(1));

    assert_eq!(run(d, &["train"]).status.code(), Some(2));
    assert_eq!(run(d, &["--version"]).status.code(), Some(0));
}
