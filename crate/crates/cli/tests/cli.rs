use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "synth": {"n_wafers": 2, "wafer_diameter_dies": 12, "n_features": 32, "anomaly_rate": 0.02, "n_shifted_features": 4},
  "model": {"hidden": 32, "depth": 1},
  "train": {"ae_epochs": 1, "dit_epochs": 2, "batch_size": 32, "lr": 0.001}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2d"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn trained(extra: &[&str]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), CONFIG).unwrap();
    ok(dir.path(), &["--config", "run.json", "synth", "--out", "raw.csv"]);
    let mut args = vec!["--config", "run.json", "train", "--data", "raw.csv", "--checkpoint", "ckpt"];
    args.extend_from_slice(extra);
    ok(dir.path(), &args);
    dir
}

fn csv_rows(text: &str) -> Vec<csv::StringRecord> {
    csv::Reader::from_reader(text.as_bytes()).records().map(|r| r.unwrap()).collect()
}

#[test]
fn synth_writes_every_die() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), CONFIG).unwrap();
    ok(dir.path(), &["--config", "run.json", "synth", "--out", "raw.csv"]);
    let text = std::fs::read_to_string(dir.path().join("raw.csv")).unwrap();
    let rows = csv_rows(&text);
    let synth = d2d_core::RunConfig::from_json(CONFIG).unwrap().synth;
    assert_eq!(rows.len(), synth.total_dies());
    assert_eq!(rows[0].len(), 5 + 32);
    let anomalies = rows
        .iter()
        .filter(|r| d2d_core::dataio::Label::parse(&r[4]).unwrap().is_anomalous())
        .count();
    assert_eq!(anomalies, synth.n_anomalies());
}

#[test]
fn score_has_one_row_per_test_device() {
    let dir = trained(&[]);
    let test = std::fs::read_to_string(dir.path().join("ckpt/test.csv")).unwrap();
    let scores = ok(dir.path(), &["--config", "run.json", "score", "--checkpoint", "ckpt"]);
    let rows = csv_rows(&scores);
    assert_eq!(rows.len(), csv_rows(&test).len());
    assert!(rows.iter().all(|r| r[5].parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn eval_report_is_json() {
    let dir = trained(&[]);
    let text = ok(dir.path(), &["--config", "run.json", "eval", "--checkpoint", "ckpt"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let auroc = v["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert!(v["recalled_count"].as_u64().is_some());
    assert_eq!(v["recalled_any"].as_bool().unwrap(), v["recalled_count"].as_u64().unwrap() > 0);
}

#[test]
fn explain_scores_match_score_command() {
    let dir = trained(&[]);
    let scores = csv_rows(&ok(dir.path(), &["--config", "run.json", "score", "--checkpoint", "ckpt"]));
    ok(dir.path(), &["--config", "run.json", "explain", "--checkpoint", "ckpt", "--out", "explain.csv"]);
    let text = std::fs::read_to_string(dir.path().join("explain.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().unwrap().clone();
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), scores.len());
    assert!(header.len() > 6);
    for (a, b) in rows.iter().zip(&scores) {
        assert_eq!(&a[5], &b[5]);
        assert!(a.iter().skip(6).all(|v| v.parse::<f64>().unwrap() >= 0.0));
    }
}

#[test]
fn manifest_lists_model_tensors() {
    let dir = trained(&[]);
    let text = std::fs::read_to_string(dir.path().join("ckpt/manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let names: Vec<&str> = v["tensors"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    for expected in ["dit.patch_proj.weight", "dit.block0.modulation.weight", "dit.final.linear.weight", "die_pe.gate"] {
        assert!(names.iter().any(|n| n.starts_with(expected)), "{expected} missing from {names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("codec.")));
    for n in &names {
        assert!(dir.path().join("ckpt/tensors").join(format!("{n}.bin")).exists(), "{n}");
    }
}

#[test]
fn ablation_flags_change_the_checkpoint() {
    let dir = trained(&["--no-die-pe", "--no-autoencoder"]);
    let text = std::fs::read_to_string(dir.path().join("ckpt/manifest.json")).unwrap();
    assert!(!text.contains("\"die_pe."));
    assert!(!text.contains("\"codec."));
    assert!(text.contains("\"standardize."));
    ok(dir.path(), &["--config", "run.json", "eval", "--checkpoint", "ckpt"]);
}

#[test]
fn raw_data_is_normalized_with_checkpoint_settings() {
    let dir = trained(&[]);
    let scores = ok(
        dir.path(),
        &["--config", "run.json", "score", "--checkpoint", "ckpt", "--data", "raw.csv", "--raw"],
    );
    let raw = std::fs::read_to_string(dir.path().join("raw.csv")).unwrap();
    assert_eq!(csv_rows(&scores).len(), csv_rows(&raw).len());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(run(p, &["score", "--checkpoint", "nowhere"]).status.code(), Some(3));
    assert_eq!(run(p, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(p, &["train"]).status.code(), Some(1));
    assert_eq!(run(p, &["--help"]).status.code(), Some(0));
    std::fs::write(p.join("bad.json"), r#"{"train": {"nonsense": 1}}"#).unwrap();
    assert_eq!(run(p, &["--config", "bad.json", "train"]).status.code(), Some(1));
}

#[test]
fn mismatched_features_are_rejected() {
    let dir = trained(&[]);
    let other = r#"{"synth": {"n_wafers": 1, "wafer_diameter_dies": 8, "n_features": 16, "anomaly_rate": 0.05, "n_shifted_features": 2}}"#;
    std::fs::write(dir.path().join("other.json"), other).unwrap();
    ok(dir.path(), &["--config", "other.json", "synth", "--out", "other.csv"]);
    let out = run(dir.path(), &["score", "--checkpoint", "ckpt", "--data", "other.csv", "--raw"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("features"));
}

#[test]
fn print_config_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["--print-config", "--seed", "7", "--lr", "0.5", "--no-die-pe", "train"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["train"]["seed"], 7);
    assert_eq!(v["synth"]["seed"], 7);
    assert_eq!(v["train"]["lr"], 0.5);
    assert_eq!(v["train"]["die_pe_enabled"], false);
}
