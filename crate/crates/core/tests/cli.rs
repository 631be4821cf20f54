use std::path::Path;
use std::process::{Command, Output};

use mbdres_unet::harness::TrajectoryLog;

fn mbdres(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbdres"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mbdres(args);
    assert!(
        out.status.success(),
        "mbdres {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_in(dir: &Path) -> usize {
    std::fs::read_dir(dir).map(|d| d.count()).unwrap_or(0)
}

#[test]
fn phantom_generate_writes_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let out = ok(&[
        "phantom",
        "generate",
        "--seed",
        "3",
        "--count",
        "2",
        "--shape",
        "32,40,36",
        "--out",
        s(&raw),
    ]);
    assert_eq!(out.lines().count(), 2);
    let brats = dir.path().join("brats");
    ok(&[
        "phantom",
        "generate",
        "--seed",
        "3",
        "--shape",
        "32",
        "--format",
        "brats",
        "--out",
        s(&brats),
    ]);
    let case = brats.join("phantom_000003");
    for m in ["flair", "t1", "t1ce", "t2", "seg"] {
        assert!(case.join(format!("phantom_000003_{m}.nii.gz")).exists(), "{m} missing");
    }
}

#[test]
fn phantom_generate_rejects_small_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mbdres(&["phantom", "generate", "--shape", "8", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn analyze_emits_a_reconciled_report() {
    let out = ok(&["analyze", "--input-shape", "64,64,64", "--json", "-"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["reconciled"], true);
    assert_eq!(v["input_shape"], serde_json::json!([64, 64, 64]));
    assert!(v["total_params"].as_u64().unwrap() > 3_000_000);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("net.json");
    std::fs::write(&cfg, r#"{"stage_widths": [16, 32, 64], "weight_mode": "disabled"}"#).unwrap();
    let json = dir.path().join("c.json");
    let table = ok(&["analyze", "--config", s(&cfg), "--json", s(&json)]);
    assert!(table.contains("params"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(v["stage_widths"], serde_json::json!([16, 32, 64]));
}

#[test]
fn analyze_rejects_indivisible_input() {
    assert!(!mbdres(&["analyze", "--input-shape", "30,32,32", "--json", "-"])
        .status
        .success());
}

#[test]
fn train_evaluate_overlay_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("train.json");
    std::fs::write(
        &cfg,
        r#"{"epochs": 2, "augment": {"crop_size": [32, 32, 32]},
            "data": {"phantom": {"count": 4, "shape": [32, 32, 32]}}}"#,
    )
    .unwrap();
    let run = root.join("run");
    let out = ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(out.contains("best epoch"));
    for f in [
        "best.ckpt",
        "last.ckpt",
        "loss.csv",
        "trajectory.csv",
        "trajectories.png",
        "train_summary.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = TrajectoryLog::read_csv(&run.join("trajectory.csv")).unwrap();
    assert_eq!(log.rows.len(), 12);
    assert_eq!(log.blocks(), (1..=6).collect::<Vec<_>>());

    let data = root.join("data");
    ok(&[
        "phantom",
        "generate",
        "--seed",
        "77",
        "--count",
        "2",
        "--shape",
        "32",
        "--out",
        s(&data),
    ]);
    let eval = root.join("eval");
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--data",
        s(&data),
        "--out",
        s(&eval),
        "--save-predictions",
    ]);
    let scores = std::fs::read_to_string(eval.join("scores.csv")).unwrap();
    let mut lines = scores.lines();
    assert_eq!(
        lines.next().unwrap(),
        "case_id,dice_ET,dice_WT,dice_TC,hd95_ET,hd95_WT,hd95_TC"
    );
    assert_eq!(lines.count(), 2);
    assert!(eval.join("summary.json").exists());
    let pred = eval.join("phantom_000077_pred.nii.gz");
    assert!(pred.exists());

    let prefix = root.join("ov/case");
    let listed = ok(&[
        "overlay",
        "--case",
        s(&data.join("phantom_000077.json")),
        "--pred",
        s(&pred),
        "--out",
        s(&prefix),
    ]);
    assert_eq!(listed.lines().count(), 3);
    for plane in ["axial", "coronal", "sagittal"] {
        assert!(root.join(format!("ov/case_{plane}.png")).exists());
    }

    let png = root.join("plot.png");
    ok(&["plot", "--trajectory", s(&run.join("trajectory.csv")), "--out", s(&png)]);
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
}

#[test]
fn evaluate_on_empty_dataset_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let net = mbdres_unet::network::Network::<f32>::new(&mbdres_unet::network::NetworkConfig::desk(), 0).unwrap();
    mbdres_unet::harness::save_checkpoint(&net, 0, 0, None, &ckpt).unwrap();
    let out_dir = dir.path().join("out");
    let out = mbdres(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&empty),
        "--out",
        s(&out_dir),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert_eq!(files_in(&out_dir), 0);
}

#[test]
fn evaluate_rejects_a_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = mbdres(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(dir.path()),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn ablate_runs_a_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    std::fs::write(
        &grid,
        r#"{"base": {"epochs": 1, "augment": {"crop_size": [32, 32, 32]},
                     "data": {"phantom": {"count": 3, "shape": [32, 32, 32]}}},
            "weighting": ["fixed_equal"], "attention": ["none"], "complexity_shape": [32, 32, 32]}"#,
    )
    .unwrap();
    let out = dir.path().join("abl");
    let table = ok(&["ablate", "--grid", s(&grid), "--out", s(&out)]);
    assert!(table.contains("fixed_equal") && table.contains("none"));
    let mut r = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert!(
        rows.iter().all(|r| r.get(10).unwrap().is_empty()),
        "a cell failed: {rows:?}"
    );
}
