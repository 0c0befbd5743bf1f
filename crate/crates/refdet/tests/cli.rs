//! End-to-end runs of the `refdet` binary on a tiny dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
output_dir = "run"

[data]
manifest = "data/manifest.jsonl"
train_short_edge = [32, 32]
test_short_edge = 32

[data.synth]
width = 32
height = 32
num_train = 6
num_test = 3
normal_fraction = 0.3

[model]
stage_channels = [4, 4, 8, 8]
fpn_channels = 8

[model.roi]
fc_dim = 16

[train]
epochs = 1
max_iters = 2
"#;

fn refdet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refdet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("structured error")
}

#[test]
fn dump_defaults_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = refdet(dir.path(), &["--dump-defaults"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = refdet::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, refdet::ExperimentConfig::default());
}

#[test]
fn bad_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[model]\nno_such_field = 1\n").unwrap();
    let out = refdet(dir.path(), &["--config", "bad.toml", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "config");
}

#[test]
fn generate_train_eval_predict_render() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("tiny.toml"), TINY).unwrap();

    let gen = refdet(root, &["--config", "tiny.toml", "generate-data"]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(root.join("data/manifest.jsonl").is_file());
    let again = refdet(root, &["--config", "tiny.toml", "generate-data"]);
    assert!(!again.status.success(), "an existing dataset is never overwritten");

    let train = refdet(root, &["--config", "tiny.toml", "train"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let ckpt = root.join("run/checkpoints/final.ckpt");
    assert!(ckpt.is_file() && root.join("run/config.resolved").is_file() && root.join("run/metrics.log").is_file());

    let eval = refdet(
        root,
        &[
            "eval",
            "--checkpoint",
            "run/checkpoints/final.ckpt",
            "--shifted",
            "--tr-post",
        ],
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("run/report/eval_test_shifted_trpost.json")).unwrap())
            .unwrap();
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));

    let first = fs::read_dir(root.join("data/images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let first = first.to_str().unwrap();
    let predict = refdet(
        root,
        &[
            "predict",
            "--checkpoint",
            "run/checkpoints/final.ckpt",
            "--out",
            "pred",
            "--threshold",
            "0.0",
            first,
            "missing.png",
        ],
    );
    assert!(predict.status.success(), "one unreadable file does not fail the batch");
    assert!(String::from_utf8_lossy(&predict.stderr).contains("missing.png"));
    let stem = Path::new(first).file_stem().unwrap().to_str().unwrap();
    assert!(root.join("pred").join(format!("{stem}.png")).is_file());

    let render = refdet(
        root,
        &[
            "render",
            "--detections",
            "pred/detections.jsonl",
            "--images",
            "data/images",
            "--out",
            "overlays",
        ],
    );
    assert!(render.status.success(), "{}", String::from_utf8_lossy(&render.stderr));
}

#[test]
fn mismatched_config_is_rejected_at_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("tiny.toml"), TINY).unwrap();
    assert!(refdet(root, &["--config", "tiny.toml", "generate-data"])
        .status
        .success());
    assert!(refdet(root, &["--config", "tiny.toml", "train"]).status.success());
    fs::write(
        root.join("other.toml"),
        TINY.replace("fpn_channels = 8", "fpn_channels = 12"),
    )
    .unwrap();
    let out = refdet(
        root,
        &[
            "--config",
            "other.toml",
            "eval",
            "--checkpoint",
            "run/checkpoints/final.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "config");
}
