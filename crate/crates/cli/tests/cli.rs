use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pdac_core::io::{read_classification_manifest, Split, MANIFEST_FILE};
use pdac_core::pipeline::{
    read_predictions, AblationRow, ExperimentConfig, SplitMode, BOXPLOT_FILE, PREDICTIONS_FILE,
    RESULTS_FILE, SUMMARY_FILE,
};

fn pdac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdac"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pdac(args);
    assert!(
        out.status.success(),
        "pdac {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let out = pdac(&["evaluate", "--predictions", "/nonexistent/predictions.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seeds = [0]\nunknown_field = 3\n").unwrap();
    let out = pdac(&["run-ablation", "--config", s(&cfg)]);
    assert!(!out.status.success());

    let out = pdac(&["run-ablation", "--dataset", "x.csv", "--row", "nonsense"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}

#[test]
fn evaluate_recomputes_tables_from_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(PREDICTIONS_FILE);
    // Labels alternate 1, 0, 1, 0. Seed 0 classifies everything correctly;
    // seed 1 has one false negative and one false positive.
    let probs = [[0.9, 0.2, 0.7, 0.4], [0.8, 0.1, 0.3, 0.6]];
    let mut text = String::from("row,seed,case_id,label,probability\n");
    for (seed, p) in probs.iter().enumerate() {
        for (i, prob) in p.iter().enumerate() {
            text.push_str(&format!("baseline,{seed},c{i},{},{prob}\n", (i % 2 == 0) as u8));
        }
    }
    fs::write(&path, text).unwrap();
    let out_dir = dir.path().join("eval");
    let table = ok(&["evaluate", "--predictions", s(&path), "--out", s(&out_dir)]);
    // Accuracy 1.0 and 0.5: mean 0.75, sample sigma sqrt(0.125).
    assert!(table.contains("0.750 ± 0.354"), "{table}");
    for f in [RESULTS_FILE, SUMMARY_FILE, BOXPLOT_FILE, PREDICTIONS_FILE] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    assert_eq!(read_predictions(&out_dir.join(PREDICTIONS_FILE)).unwrap().len(), 8);
}

#[test]
fn phantom_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg_path = dir.path().join("exp.toml");
    ok(&["prepare-phantoms", "--out", s(&data), "--n", "8", "--seed", "3", "--preset", "small", "--write-config", s(&cfg_path)]);
    let listing = ok(&["prepare-msd", "--root", s(&data), "--check"]);
    assert!(listing.contains("8 image/label pairs"), "{listing}");

    let split = dir.path().join("split.csv");
    ok(&["split", "--manifest", s(&data.join(MANIFEST_FILE)), "--out", s(&split), "--test-fraction", "0.25"]);
    let m = read_classification_manifest(&split).unwrap();
    assert_eq!(m.cases.iter().filter(|c| c.split == Split::Test).count(), 2);

    // Shrink every schedule so the workflow runs in seconds.
    let mut cfg = ExperimentConfig::load(&cfg_path).unwrap();
    cfg.slice.train.epochs = 1;
    cfg.seg.train.epochs = 1;
    cfg.triplet.epochs_stage_a = 1;
    cfg.triplet.epochs_stage_b = 1;
    cfg.seeds = vec![0, 1];
    cfg.rows = vec![AblationRow::Baseline, AblationRow::Triplet];
    cfg.paths.dataset = split.clone();
    cfg.split = SplitMode::Manifest;
    fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();

    let table = ok(&["run-ablation", "--config", s(&cfg_path)]);
    assert!(table.contains("Baseline") && table.contains("+ triplet loss"), "{table}");
    let out = &cfg.paths.output;
    let results = fs::read_to_string(out.join(RESULTS_FILE)).unwrap();
    assert!(results.starts_with("row,seed,mcc,accuracy,auc_roc"));
    assert_eq!(results.lines().count(), 5);
    assert!(out.join(BOXPLOT_FILE).is_file());
    // One prediction per held-out case, row and seed.
    assert_eq!(read_predictions(&out.join(PREDICTIONS_FILE)).unwrap().len(), 2 * 2 * 2);

    let volume = data.join("imagesTr/phantom_0000.nii.gz");
    let ckpt = out.join("models/triplet-seed0.ckpt");
    let p: f64 = ok(&["predict", "--config", s(&cfg_path), "--row", "triplet", "--classifier", s(&ckpt), "--input", s(&volume)])
        .trim()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&p));

    let seg = dir.path().join("seg.ckpt");
    ok(&["train-seg", "--config", s(&cfg_path), "--out", s(&seg)]);
    let mask = dir.path().join("mask.nii.gz");
    ok(&["predict-seg", "--checkpoint", s(&seg), "--input", s(&volume), "--out", s(&mask)]);
    assert!(mask.is_file());
}
