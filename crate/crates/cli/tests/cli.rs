use std::path::Path;
use std::process::{Command, Output};

fn claws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_claws"))
        .args(args)
        .env_remove("CLAWS_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 14] = [
    "--set", "full_height=24",
    "--set", "full_width=38",
    "--set", "crop_size=12",
    "--set", "full_encoder=4:3:2,8:3:2",
    "--set", "crop_encoder=4:3:1,8:3:2",
    "--set", "per_class=3",
    "--set", "hidden_dim=16",
];

fn synth(dir: &Path) -> String {
    let data = dir.join("data");
    let d = data.to_str().unwrap().to_string();
    ok(claws(&[
        "synth", "--out", &d, "--classes", "3", "--per-class", "10", "--height", "24", "--width", "38", "--seed", "1",
    ]));
    d
}

fn train(dir: &Path, data: &str) -> String {
    let run = dir.join("run");
    let r = run.to_str().unwrap().to_string();
    let mut args = vec!["train", "--data", data, "--out", &r, "--epochs", "1", "--seed", "4"];
    args.extend(SMALL);
    ok(claws(&args));
    run.join("checkpoint.json").to_str().unwrap().to_string()
}

#[test]
fn synth_train_evaluate_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let mut args = vec!["ingest", "--data", &data];
    args.extend(SMALL);
    let manifest: serde_json::Value = serde_json::from_str(&ok(claws(&args))).unwrap();
    assert_eq!(manifest["classes"].as_array().unwrap().len(), 3);

    let ck = train(dir.path(), &data);
    assert!(dir.path().join("run/history.csv").exists());
    assert!(dir.path().join("run/resolved_config.toml").exists());

    let mut args = vec!["evaluate", "--data", &data, "--checkpoint", &ck];
    args.extend(SMALL);
    let report: serde_json::Value = serde_json::from_str(&ok(claws(&args))).unwrap();
    let nmi = report["nmi"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&nmi));
    assert_eq!(report["k"], 3);
    assert_eq!(report["n_samples"], 30);
}

#[test]
fn evaluate_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = claws(&["evaluate", "--data", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = claws(&["ingest", "--data", dir.path().to_str().unwrap(), "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"));
}

#[test]
fn embed_export_and_gmm() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let ck = train(dir.path(), &data);
    let bin = dir.path().join("emb.bin");
    let csv = dir.path().join("emb.csv");
    let mut args = vec!["embed", "--data", &data, "--checkpoint", &ck, "--out", bin.to_str().unwrap(), "--format", "bin"];
    args.extend(SMALL);
    ok(claws(&args));
    ok(claws(&["export", "--embeddings", bin.to_str().unwrap(), "--out", csv.to_str().unwrap()]));

    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let expected: Vec<String> = ["sample_id", "label"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..32).map(|i| format!("f{i}")))
        .collect();
    assert_eq!(header, expected);
    assert_eq!(lines.count(), 30);

    let gmm_out = dir.path().join("gmm");
    ok(claws(&[
        "gmm",
        "--embeddings",
        csv.to_str().unwrap(),
        "--out",
        gmm_out.to_str().unwrap(),
        "--set",
        "gmm_components=2",
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(gmm_out.join("outliers.json")).unwrap()).unwrap();
    assert_eq!(report["n_samples"], 30);
    let projection = std::fs::read_to_string(gmm_out.join("projection.csv")).unwrap();
    assert!(projection.lines().any(|l| l == "sample_id,x,y,z,component"));
}
