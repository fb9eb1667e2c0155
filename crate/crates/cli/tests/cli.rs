use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn segguide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segguide"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = segguide(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_smoke_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let data2 = root.join("data2");
    let gen = |out: &Path| ok_json(&["gen-data", "--out", p(out), "--seed", "0", "--n-train", "128", "--n-test", "8"]);
    let a = gen(&data);
    let b = gen(&data2);
    assert_eq!(a["checksum"], b["checksum"]);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("images/train/0.png").exists());
    assert!(data.join("resolved_config.json").exists());

    let bb = root.join("backbone");
    let m = ok_json(&["train-backbone", "--data", p(&data), "--out", p(&bb), "--epochs", "1"]);
    assert!(m["test_miou"].as_f64().unwrap() > 0.0);
    for f in ["weights.bin", "model.json", "metrics.json", "train_log.jsonl", "resolved_config.json"] {
        assert!(bb.join(f).exists(), "{f}");
    }

    let guides = root.join("guides");
    let find = guides.join("find");
    let g = ok_json(&[
        "train-guide",
        "--data",
        p(&data),
        "--backbone",
        p(&bb),
        "--out",
        p(&find),
        "--epochs",
        "1",
        "--gru-hidden",
        "16",
        "--eval-every",
        "4",
        "--eval-images",
        "4",
    ]);
    assert_eq!(g["regime"], "find");
    for f in ["guide.bin", "guide.json", "train_log.jsonl", "eval.json", "resolved_config.json"] {
        assert!(find.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(find.join("train_log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 8, "64 guide images in batches of 8");
    assert!(records.iter().all(|r| r["regime"] == "find"));
    assert!(records[3]["miou_eval"].is_number());

    let report_dir = root.join("report");
    let out = segguide(&[
        "eval",
        "--data",
        p(&data),
        "--backbone",
        p(&bb),
        "--axis",
        "hint_regime",
        "--guide-root",
        p(&guides),
        "--regimes",
        "find",
        "--seeds",
        "2",
        "--out",
        p(&report_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(report_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("# axis=hint_regime seeds=2"));
    assert!(csv.lines().any(|l| l.starts_with("find,")));

    let hints_dir = root.join("hints");
    let out = segguide(&[
        "eval", "--data", p(&data), "--backbone", p(&bb), "--axis", "num_hints", "--guide", p(&find), "--hints", "2",
        "--seeds", "1", "--out", p(&hints_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(hints_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);

    let trace = root.join("bp/trace.jsonl");
    let curve = ok_json(&[
        "guide-bp",
        "--data",
        p(&data),
        "--backbone",
        p(&bb),
        "--questions",
        "3",
        "--images",
        "2",
        "--max-iterations",
        "3",
        "--out",
        p(&trace),
    ]);
    assert_eq!(curve["miou"].as_array().unwrap().len(), 4);
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 8);
    assert!(root.join("bp/trace.resolved_config.json").exists());
    assert!(root.join("bp/trace.curve.json").exists());

    let gamma = root.join("gamma.csv");
    let s = ok_json(&["export-gamma", "--guide", p(&find), "--backbone", p(&bb), "--out", p(&gamma)]);
    assert_eq!(s["classes"], 10);
    let csv = std::fs::read_to_string(&gamma).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 65, "class name + 64 channels at s4");
}

#[test]
fn failures_are_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = segguide(&["train-backbone", "--data", p(&tmp.path().join("nothing")), "--out", p(tmp.path())]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(err["error"]["command"], "train-backbone");
    assert!(err["error"]["hint"].as_str().unwrap().contains("gen-data"));

    let out = segguide(&["gen-data", "--out", p(tmp.path()), "--bogus-flag", "1"]);
    assert!(!out.status.success());

    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"out": "x", "n_trian": 3}"#).unwrap();
    let out = segguide(&["gen-data", "--config", p(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_trian"));

    let out = segguide(&[
        "eval", "--data", p(tmp.path()), "--backbone", p(tmp.path()), "--axis", "sideways", "--out", p(tmp.path()),
    ]);
    assert!(!out.status.success());
}
