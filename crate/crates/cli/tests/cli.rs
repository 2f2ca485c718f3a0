use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn evdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evdet")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = evdet(args);
    assert!(out.status.success(), "evdet {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_annotates_about_a_fifth_of_segments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[sim]\nn_segments = 1000\nevent_prob = 0.2\n").unwrap();
    let out = dir.path().join("data");
    ok(&["simulate", "--config", s(&cfg), "--seed", "4", "--out", s(&out)]);
    let manifest = json(&out.join("simulate_manifest.json"));
    let records = manifest["outputs"]["records"].as_array().unwrap();
    assert_eq!(records.len(), 1000);
    let annotated = records.iter().filter(|r| r["n_events"].as_u64().unwrap() > 0).count();
    // binomial(1000, 0.2): sd ≈ 12.6, allow 4 sd
    assert!((annotated as f64 - 200.0).abs() < 51.0, "{annotated} annotated segments");
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config"]["sim"]["seed"], 4);
    assert_eq!(manifest["command"], "simulate");
}

#[test]
fn evaluate_identical_annotations_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("a.events.json");
    std::fs::write(&ann, r#"[{"onset_s": 1.0, "duration_s": 2.0}, {"onset_s": 7.5, "duration_s": 4.25}]"#).unwrap();
    let out = dir.path().join("eval");
    ok(&["evaluate", "--data", s(&ann), "--pred", s(&ann), "--iou-threshold", "0.5", "--out", s(&out)]);
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["f1"], 1.0);
    assert_eq!((m["tp"].as_u64(), m["fp"].as_u64(), m["fn"].as_u64()), (Some(2), Some(0), Some(0)));
    assert_eq!(m["sub_threshold_overlap"], 0);
    assert_eq!(m["center_offsets"], serde_json::json!([0.0, 0.0]));
    assert_eq!(m["duration_errors"], serde_json::json!([0.0, 0.0]));
    let curve = std::fs::read_to_string(out.join("pr_curve.csv")).unwrap();
    assert!(curve.starts_with("threshold,precision,recall,f1,tp,fp,fn"));
    assert_eq!(curve.lines().count(), 102);
}

#[test]
fn evaluate_reports_precision_at_requested_recalls() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("t.json");
    let pred = dir.path().join("p.json");
    std::fs::write(&truth, r#"[{"onset_s": 0.0, "duration_s": 10.0}, {"onset_s": 20.0, "duration_s": 10.0}]"#).unwrap();
    std::fs::write(
        &pred,
        r#"[{"onset_s": 0.0, "duration_s": 10.0, "confidence": 0.9}, {"onset_s": 50.0, "duration_s": 2.0, "confidence": 0.8}]"#,
    )
    .unwrap();
    let out = dir.path().join("eval");
    ok(&["evaluate", "--data", s(&truth), "--pred", s(&pred), "--recall-levels", "0.5,1.0", "--out", s(&out)]);
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["precision"], 0.5);
    assert_eq!(m["recall"], 0.5);
    assert_eq!(m["fp_no_overlap"], 1);
    let at = m["precision_at_recall"].as_array().unwrap();
    assert_eq!(at[0]["precision"], 1.0);
    assert!(at[1]["precision"].is_null());
}

#[test]
fn train_predict_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("c.toml"), "[sim]\nn_segments = 12\nevent_prob = 0.5\n[train]\nepochs = 1\nbatch_size = 4\n")
        .unwrap();
    let cfg = p("c.toml");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&p("data"))]);
    ok(&["train", "--config", s(&cfg), "--data", s(&p("data")), "--out", s(&p("model"))]);
    for f in ["model.ckpt", "loss_trace.csv", "config.json", "train_manifest.json"] {
        assert!(p("model").join(f).exists(), "missing {f}");
    }
    let trace = std::fs::read_to_string(p("model").join("loss_trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,step,loss\n"));
    let model = p("model").join("model.ckpt");
    ok(&["predict", "--data", s(&p("data")), "--model", s(&model), "--out", s(&p("pred"))]);
    let pred = std::fs::read_to_string(p("pred").join("train_00000.events.json")).unwrap();
    let entries: Value = serde_json::from_str(&pred).unwrap();
    assert!(entries.as_array().unwrap().iter().all(|e| e.get("confidence").is_some()));
    ok(&["evaluate", "--data", s(&p("data")), "--pred", s(&p("pred")), "--out", s(&p("eval"))]);
    assert_eq!(json(&p("eval").join("metrics.json"))["n_records"], 12);

    // an event checkpoint cannot be decoded with an epoch scheme
    let out = evdet(&[
        "predict",
        "--scheme",
        "epoch-median",
        "--data",
        s(&p("data")),
        "--model",
        s(&model),
        "--out",
        s(&p("x")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn sweep_reports_four_approaches_per_iou_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[sim]\nn_segments = 12\nsnr_db_range = [6.0, 6.0]\n[train]\nepochs = 1\nbatch_size = 4\n[sweep]\nn_test_segments = 6\n",
    )
    .unwrap();
    let out = dir.path().join("sweep");
    ok(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    for tau in ["0.25", "0.75"] {
        let approaches: Vec<&str> = rows.iter().filter(|r| r[1] == tau).map(|r| r[0]).collect();
        assert_eq!(approaches, ["event", "epoch-none", "epoch-median", "epoch-morph"]);
    }
    assert!(out.join("pr_event_iou0.75.csv").exists());
    assert!(out.join("sweep_manifest.json").exists());
}

#[test]
fn failures_print_an_error_object() {
    let dir = tempfile::tempdir().unwrap();
    let out = evdet(&["train", "--data", s(&dir.path().join("missing")), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    let v: Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["error"]["command"], "train");
    assert_eq!(v["error"]["kind"], "io");
    assert!(v["error"]["message"].as_str().unwrap().contains("missing"));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepoch = 1\n").unwrap();
    let out = evdet(&["sweep", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert!(v["error"]["message"].as_str().unwrap().contains("epoch"));

    let out = evdet(&["evaluate", "--iou-threshold", "high"]);
    assert!(!out.status.success());
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(v["error"]["kind"], "usage");
}
