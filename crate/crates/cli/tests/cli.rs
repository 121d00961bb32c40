use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sen")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sen(args);
    assert!(out.status.success(), "sen {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Short recordings and a tiny network so every command finishes quickly.
const TINY: &str = r#"
[simulator]
duration = 5.0

[architecture]
window = 4
conv_channels = [2]
embed_size = 4
hidden_size = 6
head_sizes = [5]

[training]
epochs = 4
batch_size = 16

[forest]
trees = 4
max_depth = 4
"#;

fn setup(n: usize) -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let data = dir.path().join("data");
    ok(&["simulate", "--config", s(&config), "--out-dir", s(&data), "--n", &n.to_string(), "--seed", "5"]);
    (dir, config, data)
}

#[test]
fn help_matches_golden_files() {
    let commands: [&[&str]; 8] = [
        &["--help"],
        &["simulate", "--help"],
        &["train", "--help"],
        &["estimate", "--help"],
        &["evaluate", "--help"],
        &["crossval", "--help"],
        &["icp", "--help"],
        &["config", "--help"],
    ];
    for args in commands {
        let out = ok(args);
        let name = format!("{}.txt", if args.len() == 1 { "sen" } else { args[0] });
        let expected = std::fs::read_to_string(golden(&name)).unwrap();
        assert_eq!(String::from_utf8(out.stdout).unwrap(), expected, "help of {args:?} changed");
    }
}

#[test]
fn simulate_writes_files_and_manifest_deterministically() {
    let (dir, config, data) = setup(3);
    let again = dir.path().join("again");
    ok(&["simulate", "--config", s(&config), "--out-dir", s(&again), "--n", "3", "--seed", "5"]);
    for k in 1..=3 {
        let name = format!("insertion_{k}.csv");
        assert_eq!(std::fs::read(data.join(&name)).unwrap(), std::fs::read(again.join(&name)).unwrap());
    }
    let manifest =
        sen_core::dataio::parse_manifest(&std::fs::read_to_string(data.join("manifest.txt")).unwrap()).unwrap();
    assert_eq!(manifest.entries.len(), 3);
    let loaded = sen_core::dataio::load_config(&config).unwrap();
    assert_eq!(manifest.config_sha256, sen_core::dataio::config_checksum(&loaded.config));
    assert_eq!(manifest.master_seed, 5);
}

#[test]
fn train_estimate_evaluate_pipeline() {
    let (dir, config, data) = setup(2);
    let model = dir.path().join("model.txt");
    ok(&["train", "--data-dir", s(&data), "--config", s(&config), "--model-out", s(&model), "--seed", "3"]);
    let loss = std::fs::read_to_string(dir.path().join("model.txt.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 4, "header plus one row per epoch");

    let again = dir.path().join("again.txt");
    ok(&["train", "--data-dir", s(&data), "--config", s(&config), "--model-out", s(&again), "--seed", "3"]);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap());

    let norel = dir.path().join("norel.txt");
    ok(&[
        "train", "--data-dir", s(&data), "--config", s(&config), "--method", "sen-norel", "--model-out", s(&norel),
    ]);
    let m = sen_core::dataio::load_model(&norel).unwrap();
    assert!(!m.architecture.use_relative_features);

    let rec = data.join("insertion_1.csv");
    let pred = dir.path().join("pred.csv");
    let est = ok(&["estimate", "--model", s(&model), "--recording", s(&rec), "--out", s(&pred)]);
    let preds = sen_core::dataio::parse_predictions(&std::fs::read_to_string(&pred).unwrap()).unwrap();
    let recording = sen_core::dataio::load_recording(&rec).unwrap();
    assert_eq!(preds.first().unwrap().frame_index, 5);
    assert_eq!(preds.last().unwrap().frame_index, recording.len());

    let errors = std::fs::read_to_string(dir.path().join("pred.csv.errors.csv")).unwrap();
    let per_frame: Vec<f64> =
        errors.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    let eval = ok(&["evaluate", "--recording", s(&rec), "--predictions", s(&pred), "--tau", "4"]);
    let md: f64 = String::from_utf8(eval.stdout).unwrap().trim().strip_prefix("md ").unwrap().parse().unwrap();
    assert!((mean - md).abs() < 1e-9);
    assert_eq!(String::from_utf8(est.stdout).unwrap().trim(), format!("md {}", sen_core::dataio::fmt_f64(md)));

    let wrong_tau = sen(&["estimate", "--model", s(&model), "--recording", s(&rec), "--out", s(&pred), "--tau", "20"]);
    assert!(!wrong_tau.status.success());
}

#[test]
fn crossval_report_rows_and_reproducibility() {
    let (dir, config, data) = setup(2);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["crossval", "--data-dir", s(&data), "--config", s(&config), "--out", s(&a), "--seed", "9"]);
    ok(&["crossval", "--data-dir", s(&data), "--config", s(&config), "--out", s(&b), "--seed", "9", "--threads", "2"]);
    let table = std::fs::read_to_string(a.join("folds.csv")).unwrap();
    assert_eq!(table, std::fs::read_to_string(b.join("folds.csv")).unwrap());
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let folds: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0] != "mean" && r[0] != "pooled").collect();
    assert_eq!(folds.len(), 6);
    for method in ["sen", "sen-norel", "forest"] {
        let mds: Vec<f64> = folds.iter().filter(|r| r[2] == method).map(|r| r[3].parse().unwrap()).collect();
        let mean_row = rows.iter().find(|r| r[0] == "mean" && r[2] == method).unwrap();
        let mean: f64 = mean_row[3].parse().unwrap();
        assert!((mean - mds.iter().sum::<f64>() / mds.len() as f64).abs() < 1e-12);
    }
    let manifest =
        sen_core::dataio::parse_report_manifest(&std::fs::read_to_string(a.join("manifest.txt")).unwrap()).unwrap();
    assert!(manifest.reduced());
    assert_eq!(manifest.artifacts.len(), 6);
    assert!(a.join("frames_fold2_forest.csv").exists());
}

#[test]
fn icp_identity_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("cloud.csv");
    std::fs::write(&cloud, "x,y,z\n0,0,0\n10,0,0\n0,20,0\n0,0,30\n5,5,5\n").unwrap();
    let tf = dir.path().join("tf.txt");
    let out = ok(&["icp", "--moving", s(&cloud), "--reference", s(&cloud), "--out", s(&tf)]);
    let t = sen_core::dataio::parse_transform(&std::fs::read_to_string(&tf).unwrap()).unwrap();
    assert_eq!(t.to_row_major(), sen_core::RigidTransform::identity().to_row_major());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("residual_rms 0.0"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x,y,z\n1,2\n").unwrap();
    let out = sen(&["icp", "--moving", s(&bad), "--reference", s(&cloud), "--out", s(&tf)]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "one diagnostic line: {err}");
    assert!(err.starts_with("error[parse]:"));
}

#[test]
fn errors_are_single_lines_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[architecture]\ndropout = 1.5\n").unwrap();
    let out = sen(&["config", "--config", s(&config)]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[config]:") && err.contains("dropout"), "{err}");

    let rec = dir.path().join("insertion_1.csv");
    std::fs::write(&rec, "frame_index\n1\n").unwrap();
    let out = sen(&["evaluate", "--recording", s(&rec), "--predictions", s(&rec)]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);

    let out = sen(&["train", "--data-dir", s(&dir.path().join("missing")), "--model-out", "m.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[io]:"));
}

#[test]
fn config_lists_defaults() {
    let out = ok(&["config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("# default training.epochs = 480"));
    assert!(text.contains("# default architecture.dropout = 0.5"));
}
