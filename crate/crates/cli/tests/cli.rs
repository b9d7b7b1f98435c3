use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn asymdsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asymdsd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_dataset(dir: &Path) {
    let o = asymdsd(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--per-class",
        "6",
        "--points",
        "512",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn events(metrics: &Path, kind: &str) -> Vec<serde_json::Value> {
    fs::read_to_string(metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["event"] == kind)
        .collect()
}

#[test]
fn gen_data_writes_every_cloud_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let o = asymdsd(&[
            "gen-data", "--per-class", "100", "--points", "2048", "--seed", "7", "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        dir
    };
    let (a, b) = (run("a"), run("b"));
    let mut files: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.iter().filter(|f| f.to_string_lossy().ends_with(".apcd")).count(), 500);
    assert!(a.join("manifest.csv").exists());
    for f in files {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f:?}");
    }
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let o = asymdsd(&["gen-data", "--per-class", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn unknown_class_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let o = asymdsd(&["gen-data", "--out", tmp.path().to_str().unwrap(), "--classes", "sphere,pyramid"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pyramid"));
}

#[test]
fn pretrain_logs_config_steps_and_epochs() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    small_dataset(&data);
    let o = asymdsd(&[
        "pretrain", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--override", "epochs=2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = out.join("metrics.jsonl");
    let config = events(&metrics, "config");
    assert_eq!(config.len(), 1);
    assert_eq!(config[0]["config"]["train"]["epochs"], 2);
    assert_eq!(events(&metrics, "epoch").len(), 2);
    let steps = events(&metrics, "step");
    assert!(steps.len() >= 2);
    for key in ["total", "cls", "mpm", "koleo", "cls_marginal_entropy", "cls_posterior_entropy", "kl_min", "lr"] {
        assert!(steps[0][key].is_number(), "missing {key}");
    }
    assert!(out.join("checkpoint_last.adsd").exists());
    // The written config alone reproduces the run's settings.
    let echoed = fs::read_to_string(out.join("config.json")).unwrap();
    let echoed: serde_json::Value = serde_json::from_str(&echoed).unwrap();
    assert_eq!(echoed, config[0]["config"]);
}

#[test]
fn bad_overrides_exit_2_and_name_every_key() {
    let tmp = TempDir::new().unwrap();
    let o = asymdsd(&[
        "pretrain", "--data", "x", "--out", tmp.path().to_str().unwrap(), "--override", "bogus=1",
        "--override", "also_bogus=2",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bogus") && err.contains("also_bogus"), "{err}");
}

#[test]
fn invalid_config_values_are_listed_together() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"batch_size": 0}, "schedule": {"tau_student": -1.0}}"#).unwrap();
    let o = asymdsd(&["show-config", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("batch_size") && err.contains("tau_student"), "{err}");
}

#[test]
fn show_config_applies_scale_file_and_overrides() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"epochs": 7}}"#).unwrap();
    let o = asymdsd(&[
        "show-config", "--scale", "small", "--config", cfg.to_str().unwrap(), "--override", "centering=off",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["model"]["embed_dim"], 192);
    assert_eq!(v["train"]["epochs"], 7);
    assert_eq!(v["schedule"]["centering"], false);
}

#[test]
fn centering_off_collapses_to_one_token() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    small_dataset(&data);
    let o = asymdsd(&[
        "pretrain", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--override", "epochs=4", "--override", "centering=off",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let epochs = events(&out.join("metrics.jsonl"), "epoch");
    let last = epochs.last().unwrap()["cls_marginal_entropy"].as_f64().unwrap();
    assert!(last < 0.1 * 4096f64.ln(), "marginal entropy {last}");
}

#[test]
fn resume_checks_the_config_digest() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    small_dataset(&data);
    let (d, r) = (data.to_str().unwrap(), out.to_str().unwrap());
    let o = asymdsd(&["pretrain", "--data", d, "--out", r, "--override", "epochs=1"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = asymdsd(&["pretrain", "--data", d, "--out", r, "--override", "epochs=2", "--resume"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));

    let o = asymdsd(&["pretrain", "--data", d, "--out", r, "--override", "epochs=2", "--resume", "--force"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let epochs: Vec<u64> = events(&out.join("metrics.jsonl"), "epoch")
        .iter()
        .map(|e| e["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![1, 2]);
}

#[test]
fn probe_reports_accuracy_and_fails_without_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    small_dataset(&data);
    let o = asymdsd(&["pretrain", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--override", "epochs=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = out.join("checkpoint_last.adsd");
    for kind in ["linear", "knn"] {
        let o = asymdsd(&[
            "probe", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--kind", kind,
            "--k", "5", "--json",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(v["kind"], kind);
        assert_eq!(v["test"], 5);
        let acc = v["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    let o = asymdsd(&[
        "probe", "--checkpoint", tmp.path().join("missing.adsd").to_str().unwrap(), "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_names_a_corrupted_tensor() {
    let o = asymdsd(&["gradcheck", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().next().unwrap().to_string();
    let report: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(report["entries"].as_array().unwrap().len() >= 100);

    let o = asymdsd(&["gradcheck", "--corrupt", "patch_head.fc2.weight"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("patch_head.fc2.weight"));
}
