//! End-to-end runs of the `forge` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use forge_core::model::ModelConfig;
use forge_core::scm_prior::PriorConfig;

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(line.trim()).expect("stderr is one JSON object");
    assert!(v["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates two small bundles per benchmark group under `dir/bench`.
fn generate(dir: &Path) -> std::path::PathBuf {
    let bench = dir.join("bench");
    let out = forge(&["--seed", "3", "--out", s(&bench), "bench", "generate", "--per-group", "1", "--n-min", "200", "--n-max", "300"]);
    stdout_json(&out);
    bench
}

#[test]
fn unknown_flags_exit_two_with_usage_error() {
    let out = forge(&["prior", "sample", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
    let out = forge(&["sweep", "--axis", "depth", "--ckpt", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_nonzero_with_kind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = forge(&["--out", s(&dir.path().join("r")), "real", "--manifest", s(&missing), "--ckpt", "x"]);
    assert_eq!(out.status.code(), Some(1));
    error_json(&out);

    let out = forge(&["bench", "generate", "--out", s(dir.path()), "--n-min", "500", "--n-max", "100"]);
    assert_eq!(error_json(&out)["error"]["kind"], "config");

    let bench = generate(dir.path());
    let out = forge(&["--out", s(&dir.path().join("e")), "evaluate", "--bundle", s(&bench), "--methods", "fairpfn"]);
    assert_eq!(error_json(&out)["error"]["kind"], "missing");
}

#[test]
fn help_and_version_succeed() {
    assert!(forge(&["--help"]).status.success());
    assert!(forge(&["--version"]).status.success());
}

#[test]
fn prior_sample_writes_paired_worlds() {
    let dir = tempfile::tempdir().unwrap();
    let out = forge(&["--seed", "5", "--out", s(dir.path()), "prior", "sample", "--count", "2", "--keep-noise"]);
    assert_eq!(stdout_json(&out)["samples"], 2);
    for i in 0..2 {
        let d = dir.path().join(format!("sample_{i:04}"));
        for f in ["observational.csv", "counterfactual.csv", "y_fair.csv", "scm.json", "noise.json"] {
            assert!(d.join(f).exists(), "{f}");
        }
        let obs = fs::read_to_string(d.join("observational.csv")).unwrap();
        let cf = fs::read_to_string(d.join("counterfactual.csv")).unwrap();
        assert_eq!(obs.lines().count(), cf.lines().count());
        assert_eq!(obs.lines().next(), cf.lines().next());
    }
    let again = tempfile::tempdir().unwrap();
    forge(&["--seed", "5", "--out", s(again.path()), "prior", "sample", "--count", "2", "--keep-noise"]);
    let a = fs::read(dir.path().join("sample_0001/observational.csv")).unwrap();
    let b = fs::read(again.path().join("sample_0001/observational.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluate_without_a_model_and_with_imported_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let bench = generate(dir.path());
    let bundles = fs::read_dir(&bench).unwrap().count();
    assert!(bundles >= 6);
    let out_dir = dir.path().join("eval");
    let out = forge(&["--seed", "1", "--out", s(&out_dir), "evaluate", "--bundle", s(&bench), "--methods", "constant,random"]);
    assert_eq!(stdout_json(&out)["bundles"], bundles);
    for f in ["report.json", "metrics.json", "metrics_metrics.csv", "metrics_ae_histogram.csv", "query_rows.csv", "tradeoff.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }

    // feed the query rows back as a perfectly fair external method
    let queries = fs::read_to_string(out_dir.join("query_rows.csv")).unwrap();
    let mut preds = String::from("dataset,row,prob,prob_cf\n");
    for line in queries.lines().skip(1) {
        preds.push_str(&format!("{line},0.25,0.25\n"));
    }
    let preds_path = dir.path().join("ext.csv");
    fs::write(&preds_path, preds).unwrap();
    let spec = format!("ext={}", s(&preds_path));
    let out = forge(&["--seed", "1", "--out", s(&out_dir), "evaluate", "--bundle", s(&bench), "--methods", "constant", "--import-preds", &spec]);
    stdout_json(&out);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    let ext: Vec<&serde_json::Value> = report["metrics"].as_array().unwrap().iter().filter(|m| m["method"] == "ext").collect();
    assert_eq!(ext.len(), bundles);
    assert!(ext.iter().all(|m| m["ate"] == 0.0 && m["dsp"] == 0.0));

    // a different seed picks different query rows, so the import no longer covers them
    let out = forge(&["--seed", "2", "--out", s(&out_dir), "evaluate", "--bundle", s(&bench), "--methods", "constant", "--import-preds", &spec]);
    assert_eq!(error_json(&out)["error"]["kind"], "missing");
}

#[test]
fn tiny_model_trains_and_drives_the_model_commands() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig { steps: 3, max_features: 16, max_rows: 128, ..ModelConfig::tiny() };
    let prior = PriorConfig { num_samples: 60, ..PriorConfig::training() };
    let model_path = dir.path().join("model.json");
    let prior_path = dir.path().join("prior.json");
    fs::write(&model_path, serde_json::to_string(&model).unwrap()).unwrap();
    fs::write(&prior_path, serde_json::to_string(&prior).unwrap()).unwrap();
    let ckpt_dir = dir.path().join("ckpt");
    let out = forge(&[
        "--out", s(&ckpt_dir), "train", "--model-config", s(&model_path), "--prior-config", s(&prior_path),
        "--checkpoint-every", "2",
    ]);
    stdout_json(&out);
    let ckpt = ckpt_dir.join("checkpoint.bin");
    assert!(ckpt.exists());
    assert!(ckpt_dir.join("loss.csv").exists());

    let bench = generate(dir.path());
    let out = forge(&["--out", s(&dir.path().join("e")), "evaluate", "--bundle", s(&bench), "--ckpt", s(&ckpt)]);
    stdout_json(&out);

    let sweep = dir.path().join("sweep");
    let out = forge(&["--out", s(&sweep), "--threads", "1", "sweep", "--axis", "n", "--ckpt", s(&ckpt), "--bundle", s(&bench)]);
    assert_eq!(stdout_json(&out)["axis"], "n");
    assert!(sweep.join("quintiles.csv").exists());
}
