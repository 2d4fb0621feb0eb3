//! End-to-end pipeline tests: the CLI against a generated cohort file,
//! flag overrides, exit codes, and property-based invariants for the
//! textual interchange formats.

use std::path::{Path, PathBuf};
use std::process::Command;

use proptest::prelude::*;
use rand::Rng;

use covshift::eval::percentile;
use covshift::runner::ExperimentConfig;
use covshift::shift_lab::{Provenance, SplitAssignment};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_covshift")
}

/// Wide-format cohort: two blood-pressure blobs (the shift axis), three
/// fully observed hours per patient, mixed labels in both blobs.
fn write_cohort(path: &Path) {
    let mut rng = covshift::rng::stream(41, 0xC0507);
    let mut text = String::from("patient_id,hour,hr,rr,spo2,temp,sbp,dbp,label\n");
    let mut patient = |id: usize, sbp0: f64, dbp0: f64, label: u8, text: &mut String| {
        for hour in 0..3 {
            text.push_str(&format!(
                "p{id},{hour},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{label}\n",
                80.0 + rng.random_range(-8.0..8.0) + label as f64 * 6.0,
                16.0 + rng.random_range(-2.0..2.0),
                97.0 + rng.random_range(-1.5..1.5),
                36.8 + rng.random_range(-0.4..0.4),
                sbp0 + rng.random_range(-3.0..3.0),
                dbp0 + rng.random_range(-3.0..3.0),
            ));
        }
    };
    // blob A: 50 patients around (150, 95); blob B: 30 around (105, 65)
    for i in 0..50 {
        patient(i, 150.0, 95.0, (i % 2) as u8, &mut text);
    }
    for i in 50..80 {
        patient(i, 105.0, 65.0, (i % 2) as u8, &mut text);
    }
    std::fs::write(path, text).unwrap();
}

fn cohort_config(dir: &Path, cohort: &Path, out: &Path) -> PathBuf {
    let path = dir.join("cohort.toml");
    std::fs::write(
        &path,
        format!(
            "schema_version = 1\n\
             [data]\nsource = \"cohort\"\ncohort_path = {cohort:?}\n\
             [shift]\nkind = \"spectral\"\nfeature_pair = [\"sbp\", \"dbp\"]\n\
             [experiment]\nfamilies = [\"logistic\"]\ncorrections = [\"none\", \"kmm\"]\n\
             n_boot = 50\nout = {out:?}\n\
             [grids]\nlogistic_penalties = [0.01]\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn replicate_runs_on_a_cohort_file() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort.csv");
    write_cohort(&cohort);
    let out = dir.path().join("out");
    let config = cohort_config(dir.path(), &cohort, &out);
    let status = Command::new(bin())
        .args(["replicate", "--seed", "3", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(status.success());
    let report = std::fs::read_to_string(out.join("replication.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    // 1 family x (training_5cv, upper_bound, none, kmm)
    assert_eq!(lines.len(), 1 + 4, "unexpected report: {report}");
    for line in &lines[1..] {
        assert!(line.starts_with("logistic,"), "{line}");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("upper_bound_pooled_cv"));
}

#[test]
fn ratios_and_explain_run_on_a_cohort_file() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort.csv");
    write_cohort(&cohort);
    let out = dir.path().join("out");
    let config = cohort_config(dir.path(), &cohort, &out);
    let status = Command::new(bin())
        .args(["ratios", "--seed", "3", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(status.success());
    let weights = std::fs::read_to_string(out.join("weights_kmm.csv")).unwrap();
    // 50-patient blob becomes the training side
    assert_eq!(weights.lines().count(), 1 + 50, "{weights}");

    let status = Command::new(bin())
        .args(["explain", "--seed", "3", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(status.success());
    let summary = std::fs::read_to_string(out.join("shapley_summary.csv")).unwrap();
    // 6 features x (2 corrections + testing reference)
    assert_eq!(summary.lines().count(), 1 + 18, "{summary}");
    assert!(summary.contains("sbp,"));
}

#[test]
fn provided_split_and_interval_override() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort.csv");
    write_cohort(&cohort);
    let split = SplitAssignment {
        train_indices: (0..50).collect(),
        test_indices: (50..80).collect(),
        provenance: Provenance::Provided,
    };
    let split_path = dir.path().join("split.csv");
    std::fs::write(&split_path, split.to_csv()).unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("provided.toml");
    std::fs::write(
        &config,
        format!(
            "schema_version = 1\n\
             [data]\nsource = \"cohort\"\ncohort_path = {cohort:?}\n\
             [shift]\nkind = \"provided\"\nsplit_path = {split_path:?}\n\
             [experiment]\nfamilies = [\"logistic\"]\ncorrections = [\"none\"]\n\
             refits = 3\nout = {out:?}\n\
             [grids]\nlogistic_penalties = [0.01]\n"
        ),
    )
    .unwrap();
    let status = Command::new(bin())
        .args(["replicate", "--seed", "3", "--interval", "seeds", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"interval\": \"seeds\""), "{manifest}");
}

#[test]
fn exit_code_2_for_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    // missing config file
    let status = Command::new(bin())
        .args(["synthetic", "--config", "/nonexistent/exp.toml"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    // unknown key
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\nbogus = true\n").unwrap();
    let status = Command::new(bin()).args(["synthetic", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));
    // zero threads
    let status = Command::new(bin()).args(["synthetic", "--threads", "0"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn exit_code_3_for_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort.csv");
    std::fs::write(&cohort, "patient_id,hour,hr,rr,spo2,temp,sbp,dbp,label\np0,0,not_a_number,16,97,36.8,120,80,0\n")
        .unwrap();
    let out = dir.path().join("out");
    let config = cohort_config(dir.path(), &cohort, &out);
    let output = Command::new(bin())
        .args(["replicate", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&output.stderr).contains("error:"));
}

#[test]
fn config_toml_roundtrip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let path = dir.path().join("default.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let back = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg, back);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_csv_roundtrips(train in prop::collection::vec(0usize..500, 1..40),
                            test in prop::collection::vec(500usize..1000, 1..40)) {
        let split = SplitAssignment {
            train_indices: train,
            test_indices: test,
            provenance: Provenance::Spectral,
        };
        let parsed = SplitAssignment::from_csv(&split.to_csv()).unwrap();
        prop_assert_eq!(parsed.train_indices, split.train_indices);
        prop_assert_eq!(parsed.test_indices, split.test_indices);
    }

    #[test]
    fn percentile_stays_within_range(mut values in prop::collection::vec(-1e3f64..1e3, 2..50),
                                     q in 0.0f64..1.0) {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p = percentile(&values, q);
        prop_assert!(p >= values[0] - 1e-12);
        prop_assert!(p <= values[values.len() - 1] + 1e-12);
    }

    #[test]
    fn mean_one_weights_average_to_one(values in prop::collection::vec(1e-3f64..50.0, 1..60)) {
        let w = covshift::Weights::raw(values).unwrap().mean_one().unwrap();
        let mean = w.values().iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() <= 1e-9);
    }
}
