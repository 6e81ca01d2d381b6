use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn lisnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lisnet")).args(args).output().expect("spawn lisnet")
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    lisnet(&args)
}

fn write_json(path: &Path, v: &serde_json::Value) -> PathBuf {
    std::fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

fn scenario() -> serde_json::Value {
    json!({"M": 16, "L": 8, "K": 2, "P": 16, "N_D": 10, "N_A": 10, "N_H": 10, "noise_power": 0.0, "seed": 2020})
}

fn generate_desk(dir: &Path, u: usize, v: usize) -> PathBuf {
    let cfg = write_json(
        &dir.join("gen.json"),
        &json!({
            "scenario": scenario(),
            "generation": {"U": u, "V": v, "label_snrs_db": ["inf"], "train_snrs_db": [10]}
        }),
    );
    let out = dir.join("data");
    let o = run("generate", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn header_count(path: &Path) -> u64 {
    let bytes = std::fs::read(path).unwrap();
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    header["count"].as_u64().unwrap()
}

#[test]
fn generate_writes_both_datasets_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate_desk(dir.path(), 5, 50);
    assert_eq!(header_count(&out.join("direct.lsds")), 500);
    assert_eq!(header_count(&out.join("cascaded.lsds")), 500);
    assert!(out.join("generate_manifest.json").exists());
    let first = std::fs::read(out.join("cascaded.lsds")).unwrap();

    let o = run("generate", &dir.path().join("gen.json"), &dir.path().join("again"), &[]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(dir.path().join("again/cascaded.lsds")).unwrap(), first);
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("generate", &dir.path().join("nope.json"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn invalid_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = scenario();
    s["M"] = json!(0);
    let cfg = write_json(
        &dir.path().join("gen.json"),
        &json!({"scenario": s, "generation": {"U": 1, "V": 1, "label_snrs_db": ["inf"], "train_snrs_db": [10]}}),
    );
    assert_eq!(run("generate", &cfg, dir.path(), &[]).status.code(), Some(2));
}

fn train_config(dir: &Path, dataset: &Path, max_epochs: usize) -> PathBuf {
    write_json(
        &dir.join("train.json"),
        &json!({
            "dataset": dataset,
            "network": {"filters": 4, "fc1": 16, "fc2": 16},
            "training": {"learning_rate": 0.01, "batch_size": 32, "max_epochs": max_epochs, "seed": 3}
        }),
    )
}

#[test]
fn train_writes_checkpoint_and_log_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_desk(dir.path(), 2, 20);
    let cfg = train_config(dir.path(), &data.join("direct.lsds"), 2);
    let o = run("train", &cfg, &dir.path().join("a"), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("a/direct_train_log.csv")).unwrap();
    let rows = log.lines().count() - 1;
    assert!((1..=2).contains(&rows), "{log}");
    assert!(dir.path().join("a/train_manifest.json").exists());

    let o = run("train", &cfg, &dir.path().join("b"), &[]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("a/direct.lsnn")).unwrap(),
        std::fs::read(dir.path().join("b/direct.lsnn")).unwrap()
    );

    // a checkpoint is usable for prediction and sweeps
    let pcfg = write_json(
        &dir.path().join("predict.json"),
        &json!({"scenario": scenario(), "checkpoints": {"direct": dir.path().join("a/direct.lsnn")}}),
    );
    let o = run("predict", &pcfg, &dir.path().join("p"), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("p/prediction.json")).unwrap()).unwrap();
    assert_eq!(pred.as_array().unwrap().len(), 2);
    assert_eq!(pred[0]["h_direct_hat"].as_array().unwrap().len(), 16);
}

#[test]
fn corrupted_dataset_names_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_desk(dir.path(), 1, 2);
    let path = data.join("direct.lsds");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 7);
    let bad = dir.path().join("bad.lsds");
    std::fs::write(&bad, &bytes).unwrap();
    let cfg = train_config(dir.path(), &bad, 1);
    let o = run("train", &cfg, &dir.path().join("t"), &[]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("offset"), "{err}");
}

fn sweep_config(dir: &Path, estimators: serde_json::Value) -> PathBuf {
    write_json(
        &dir.join("sweep.json"),
        &json!({
            "scenario": scenario(),
            "sweep": {"kind": "snr", "grid": [0, 10], "trials": 5, "estimators": estimators, "seed": 1}
        }),
    )
}

#[test]
fn ls_sweep_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path(), json!(["ls_per_column", "ls_joint"]));
    let out = dir.path().join("s");
    let o = run("sweep", &cfg, &out, &["--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let csv = names.iter().find(|n| n.starts_with("snr_") && n.ends_with(".csv")).expect("csv output");
    assert!(names.iter().any(|n| n.starts_with("snr_") && n.ends_with(".json")));
    assert!(names.iter().any(|n| n == "sweep_manifest.json"));
    let text = std::fs::read_to_string(out.join(csv)).unwrap();
    assert_eq!(text.lines().count(), 1 + 8);

    // --seed overrides the configured seed and changes the config hash
    let o = run("sweep", &cfg, &dir.path().join("s2"), &["--seed", "9"]);
    assert!(o.status.success());
    let other: Vec<String> = std::fs::read_dir(dir.path().join("s2"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert_ne!(other[0].rsplit('_').next(), csv.rsplit('_').next());
}

#[test]
fn channelnet_sweep_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path(), json!(["channelnet"]));
    let o = run("sweep", &cfg, &dir.path().join("s"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("network"));
}
