//! Experiment orchestration behind the CLI: config resolution, the
//! family-by-correction report grid, prior/concept-shift controls, the
//! synthetic benchmark, weight dumps, and Shapley summaries.
//!
//! Every run writes plot-ready CSVs plus a `manifest.json` tying each
//! artifact to the resolved config, master seed, and an audit trail of the
//! places test labels were read. Cells execute sequentially in a fixed
//! order so reruns with the same config and seed are byte-identical.

pub mod config;

pub use config::{
    Benchmark, Correction, DataSource, ExperimentConfig, Family, IntervalMode, ShiftKind,
    SCHEMA_VERSION,
};

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data_model::{self, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    auroc, bootstrap_interval, brier, grid_search, kfold_cv, spearman, weighted_risk, EvalReport,
    Loss, Metric,
};
use crate::explain::{mean_abs_shapley, ShapleyMode, MAX_EXACT_DIM};
use crate::learners::{self, LearnerSpec, LogisticSpec};
use crate::ratio::{
    classifier_weights, kmm_weights, rulsif_weights, ClassifierKind, ClassifierRatioConfig,
    KmmConfig, RulsifConfig, Weights,
};
use crate::rng;
use crate::shift_lab::{
    make_concept_shift, make_prior_shift, make_synthetic_shift, spectral_split, true_density_ratio,
    Provenance, SplitAssignment, SyntheticShiftSpec,
};

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingEntry {
    pub name: String,
    pub millis: u128,
}

/// Provenance record written next to every report. Timings vary between
/// runs; the report CSVs themselves are deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub software_version: String,
    pub master_seed: u64,
    pub threads: usize,
    pub config: ExperimentConfig,
    pub artifacts: Vec<ArtifactEntry>,
    pub timings_ms: Vec<TimingEntry>,
    /// Every place test-set labels were read, in execution order.
    pub test_label_accesses: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig, threads: usize) -> RunManifest {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: cfg.experiment.seed,
            threads,
            config: cfg.clone(),
            artifacts: Vec::new(),
            timings_ms: Vec::new(),
            test_label_accesses: Vec::new(),
        }
    }

    fn record_artifact(&mut self, name: &str, path: &Path) {
        self.artifacts.push(ArtifactEntry { name: name.to_string(), path: path.to_path_buf() });
    }

    fn record_timing(&mut self, name: &str, started: Instant) {
        self.timings_ms
            .push(TimingEntry { name: name.to_string(), millis: started.elapsed().as_millis() });
    }

    fn record_label_access(&mut self, site: &str) {
        self.test_label_accesses.push(site.to_string());
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    fn write(&mut self, out: &Path) -> Result<()> {
        let path = out.join("manifest.json");
        self.record_artifact("manifest", &path);
        std::fs::write(&path, self.to_json() + "\n")?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Data assembly

/// Train/test datasets resolved from the config, plus the generator spec
/// when the data is synthetic (enables oracle weights).
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub provenance: Provenance,
    pub synthetic_spec: Option<SyntheticShiftSpec>,
}

fn benchmark_spec(benchmark: Benchmark, seed: u64) -> SyntheticShiftSpec {
    match benchmark {
        Benchmark::SignFlip => SyntheticShiftSpec::default_benchmark(seed),
        Benchmark::Gaussian1d => SyntheticShiftSpec::gaussian_1d_shift(seed),
        Benchmark::NoShift => {
            let mut spec = SyntheticShiftSpec::default_benchmark(seed);
            spec.test = spec.train.clone();
            spec
        }
    }
}

/// Resolve the configured data source into normalized train/test splits.
/// Cohort data is normalized with training-set statistics only.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let seed = cfg.experiment.seed;
    match cfg.data.source {
        DataSource::Synthetic => {
            let spec = benchmark_spec(cfg.shift.benchmark, seed);
            let (train, test) = make_synthetic_shift(&spec, cfg.shift.n_train, cfg.shift.n_test)?;
            Ok(PreparedData {
                train,
                test,
                provenance: Provenance::Synthetic,
                synthetic_spec: Some(spec),
            })
        }
        DataSource::Cohort => {
            let path = cfg.data.cohort_path.as_ref().expect("validated");
            let records = data_model::load_cohort(path)?;
            let grid = data_model::hourly_segment(&records)?;
            let imputed = data_model::impute(&grid)?;
            let snapshot = data_model::snapshot(&imputed)?;
            let split = match cfg.shift.kind {
                ShiftKind::Spectral => {
                    let pair = cfg.shift.feature_pair.as_ref().expect("validated");
                    spectral_split(
                        &snapshot,
                        (&pair[0], &pair[1]),
                        2,
                        None,
                        rng::child_seed(seed, 0x0511),
                    )?
                }
                ShiftKind::Provided => {
                    let path = cfg.shift.split_path.as_ref().expect("validated");
                    let text = std::fs::read_to_string(path)?;
                    let split = SplitAssignment::from_csv(&text)?;
                    split.validate(snapshot.n_rows())?;
                    split
                }
                ShiftKind::Synthetic => unreachable!("rejected by config validation"),
            };
            let provenance = split.provenance;
            let train_raw = snapshot.select(&split.train_indices)?;
            let test_raw = snapshot.select(&split.test_indices)?;
            let (train, stats) = data_model::normalize(&train_raw)?;
            let test = data_model::apply_norm(&test_raw, &stats)?;
            Ok(PreparedData { train, test, provenance, synthetic_spec: None })
        }
    }
}

/// Stack two datasets with identical feature sets (the "Upper bound" pool).
pub fn vstack(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if a.feature_names() != b.feature_names() {
        return Err(Error::Data("cannot stack datasets with different features".into()));
    }
    let mut x = DMatrix::zeros(a.n_rows() + b.n_rows(), a.n_features());
    x.rows_mut(0, a.n_rows()).copy_from(a.x());
    x.rows_mut(a.n_rows(), b.n_rows()).copy_from(b.x());
    let mut y = a.y().to_vec();
    y.extend_from_slice(b.y());
    Dataset::new(x, y, a.feature_names().to_vec())
}

// ---------------------------------------------------------------------------
// Weight estimation

/// Estimate importance weights for one correction from covariates only.
/// `Correction::None` yields no weights (uniform fitting downstream).
pub fn estimate_weights(
    correction: Correction,
    train_x: &DMatrix<f64>,
    test_x: &DMatrix<f64>,
    seed: u64,
) -> Result<Option<Weights>> {
    let w = match correction {
        Correction::None => return Ok(None),
        Correction::Kmm => kmm_weights(train_x, test_x, &KmmConfig::default(), seed)?,
        Correction::Rulsif => rulsif_weights(train_x, test_x, &RulsifConfig::default(), seed)?,
        Correction::ClassifierLr => classifier_weights(
            train_x,
            test_x,
            &ClassifierRatioConfig {
                kind: ClassifierKind::LogisticElasticNet,
                ..ClassifierRatioConfig::default()
            },
            seed,
        )?,
        Correction::ClassifierRf => classifier_weights(
            train_x,
            test_x,
            &ClassifierRatioConfig {
                kind: ClassifierKind::RandomForest,
                ..ClassifierRatioConfig::default()
            },
            seed,
        )?,
    };
    Ok(Some(w))
}

fn weights_for_corrections(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<(Correction, Option<Weights>)>> {
    let seed = cfg.experiment.seed;
    cfg.experiment
        .corrections
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let w = estimate_weights(c, train.x(), test.x(), rng::child_seed(seed, 0x0E57 + i as u64))?;
            Ok((c, w))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cell evaluation

fn cell_seed(master: u64, family_idx: usize, step: u64) -> u64 {
    rng::child_seed(master, 0x1000 + (family_idx as u64) * 0x40 + step)
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Report row for a cross-validated metric: the interval is mean ± one fold
/// standard deviation, clamped to [0, 1].
fn cv_report(
    family: Family,
    correction: &str,
    cv: &crate::eval::CvMetrics,
    n_test: usize,
) -> EvalReport {
    EvalReport {
        model: family.label().to_string(),
        correction: correction.to_string(),
        auroc: cv.auroc_mean,
        auroc_lo: clamp_unit(cv.auroc_mean - cv.auroc_std),
        auroc_hi: clamp_unit(cv.auroc_mean + cv.auroc_std),
        brier: cv.brier_mean,
        brier_lo: (cv.brier_mean - cv.brier_std).max(0.0),
        brier_hi: cv.brier_mean + cv.brier_std,
        n_test,
    }
}

/// Fit on the training set (optionally weighted) and evaluate on the test
/// set, attaching bootstrap or refit-seed intervals per the config.
fn evaluate_cell(
    train: &Dataset,
    test: &Dataset,
    spec: &LearnerSpec,
    weights: Option<&Weights>,
    family: Family,
    correction: &str,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<EvalReport> {
    let e = &cfg.experiment;
    let w = match weights {
        Some(w) => w.clone(),
        None => Weights::uniform(train.n_rows()),
    };
    let model = learners::fit(spec, train.x(), train.y(), &w, rng::child_seed(seed, 0))?;
    let probs = model.predict_proba(test.x())?;
    let scores = probs.as_slice();
    let auroc_pt = auroc(scores, test.y())?;
    let brier_pt = brier(scores, test.y())?;
    let (auroc_lo, auroc_hi, brier_lo, brier_hi) = match e.interval {
        IntervalMode::Bootstrap => {
            let (alo, ahi) = bootstrap_interval(
                scores,
                test.y(),
                Metric::Auroc,
                e.n_boot,
                e.level,
                rng::child_seed(seed, 1),
            )?;
            let (blo, bhi) = bootstrap_interval(
                scores,
                test.y(),
                Metric::Brier,
                e.n_boot,
                e.level,
                rng::child_seed(seed, 2),
            )?;
            (alo, ahi, blo, bhi)
        }
        IntervalMode::Seeds => {
            // refit 0 is the reported model, so the point estimate always
            // lies inside the min/max envelope
            let mut aurocs = vec![auroc_pt];
            let mut briers = vec![brier_pt];
            for r in 1..e.refits {
                let m = learners::fit(
                    spec,
                    train.x(),
                    train.y(),
                    &w,
                    rng::child_seed(seed, 10 + r as u64),
                )?;
                let p = m.predict_proba(test.x())?;
                aurocs.push(auroc(p.as_slice(), test.y())?);
                briers.push(brier(p.as_slice(), test.y())?);
            }
            let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (min(&aurocs), max(&aurocs), min(&briers), max(&briers))
        }
    };
    let report = EvalReport {
        model: family.label().to_string(),
        correction: correction.to_string(),
        auroc: auroc_pt,
        auroc_lo,
        auroc_hi,
        brier: brier_pt,
        brier_lo,
        brier_hi,
        n_test: test.n_rows(),
    };
    report.validate()?;
    Ok(report)
}

/// The Tables 2/3/5-shaped grid: per family, a training-set CV row, a
/// pooled train+test CV row, and one train-on-train/test-on-test row per
/// configured correction. Weights are estimated once per correction and
/// shared across families.
fn run_grid(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    manifest: &mut RunManifest,
) -> Result<Vec<EvalReport>> {
    let e = &cfg.experiment;
    let seed = e.seed;
    let weight_sets = weights_for_corrections(cfg, train, test)?;
    manifest.record_label_access("upper_bound_pooled_cv");
    let pooled = vstack(train, test)?;
    let mut rows = Vec::new();
    for (fi, &family) in e.families.iter().enumerate() {
        let candidates = cfg.candidates(family);
        let started = Instant::now();

        let gs_seed = cell_seed(seed, fi, 0);
        let gs = grid_search(train, &candidates, None, e.cv_folds, gs_seed)?;
        let cv = kfold_cv(train, &gs.best_spec, None, e.cv_folds, gs_seed)?;
        rows.push(cv_report(family, "training_5cv", &cv, train.n_rows()));

        let ub_seed = cell_seed(seed, fi, 1);
        let gs = grid_search(&pooled, &candidates, None, e.cv_folds, ub_seed)?;
        let cv = kfold_cv(&pooled, &gs.best_spec, None, e.cv_folds, ub_seed)?;
        rows.push(cv_report(family, "upper_bound", &cv, pooled.n_rows()));

        for (ci, (correction, weights)) in weight_sets.iter().enumerate() {
            let cell = cell_seed(seed, fi, 2 + ci as u64);
            let gs = grid_search(train, &candidates, weights.as_ref(), e.cv_folds, cell)?;
            manifest.record_label_access("test_evaluation");
            rows.push(evaluate_cell(
                train,
                test,
                &gs.best_spec,
                weights.as_ref(),
                family,
                correction.label(),
                cfg,
                cell,
            )?);
        }
        manifest.record_timing(&format!("family_{}", family.label()), started);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Report emission

fn write_reports(path: &Path, rows: &[EvalReport]) -> Result<()> {
    let mut text = String::from(EvalReport::csv_header());
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn ensure_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.experiment.out.clone();
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Subcommand entry points

/// `replicate`: the full family-by-correction grid on the configured data.
pub fn run_replication(cfg: &ExperimentConfig, threads: usize) -> Result<RunManifest> {
    cfg.validate()?;
    let out = ensure_out(cfg)?;
    let mut manifest = RunManifest::new("replicate", cfg, threads);
    let started = Instant::now();
    let data = prepare_data(cfg)?;
    manifest.record_timing("prepare_data", started);
    let rows = run_grid(cfg, &data.train, &data.test, &mut manifest)?;
    let path = out.join("replication.csv");
    write_reports(&path, &rows)?;
    manifest.record_artifact("replication", &path);
    manifest.write(&out)?;
    Ok(manifest)
}

/// `prior-shift`: one unweighted fit per family, evaluated on test pools
/// rebalanced to each configured positive rate.
pub fn run_prior_shift(cfg: &ExperimentConfig, threads: usize) -> Result<RunManifest> {
    cfg.validate()?;
    let out = ensure_out(cfg)?;
    let mut manifest = RunManifest::new("prior-shift", cfg, threads);
    let data = prepare_data(cfg)?;
    let e = &cfg.experiment;
    let seed = e.seed;

    // rebalanced evaluation pools are shared across families
    manifest.record_label_access("prior_shift_rebalance");
    let mut pools = Vec::new();
    for (ri, &rate) in cfg.prior.rates.iter().enumerate() {
        let split = make_prior_shift(&data.test, rate, rng::child_seed(seed, 0x9A00 + ri as u64))?;
        pools.push((rate, data.test.select(&split.test_indices)?));
    }

    let mut text = String::from("model,target_rate,realized_rate,auroc,brier,n_test\n");
    for (fi, &family) in e.families.iter().enumerate() {
        let started = Instant::now();
        let candidates = cfg.candidates(family);
        let cell = cell_seed(seed, fi, 0);
        let gs = grid_search(&data.train, &candidates, None, e.cv_folds, cell)?;
        let model = learners::fit(
            &gs.best_spec,
            data.train.x(),
            data.train.y(),
            &Weights::uniform(data.train.n_rows()),
            rng::child_seed(cell, 0),
        )?;
        manifest.record_label_access("test_evaluation");
        for (rate, pool) in &pools {
            let probs = model.predict_proba(pool.x())?;
            let a = auroc(probs.as_slice(), pool.y())?;
            let b = brier(probs.as_slice(), pool.y())?;
            text.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                family.label(),
                rate,
                pool.positive_rate(),
                a,
                b,
                pool.n_rows()
            ));
        }
        manifest.record_timing(&format!("family_{}", family.label()), started);
    }
    let path = out.join("prior_shift.csv");
    std::fs::write(&path, text)?;
    manifest.record_artifact("prior_shift", &path);
    manifest.write(&out)?;
    Ok(manifest)
}

/// `concept-shift`: the replication grid against a test set whose labels
/// are redrawn independently of the covariates.
pub fn run_concept_shift(cfg: &ExperimentConfig, threads: usize) -> Result<RunManifest> {
    cfg.validate()?;
    let out = ensure_out(cfg)?;
    let mut manifest = RunManifest::new("concept-shift", cfg, threads);
    let data = prepare_data(cfg)?;
    manifest.record_label_access("concept_shift_relabel");
    let shifted = make_concept_shift(&data.test, rng::child_seed(cfg.experiment.seed, 0xC09C))?;
    let rows = run_grid(cfg, &data.train, &shifted, &mut manifest)?;
    let path = out.join("concept_shift.csv");
    write_reports(&path, &rows)?;
    manifest.record_artifact("concept_shift", &path);
    manifest.write(&out)?;
    Ok(manifest)
}

fn oracle_weights(data: &PreparedData) -> Result<Option<Weights>> {
    let Some(spec) = &data.synthetic_spec else { return Ok(None) };
    let raw: Vec<f64> = (0..data.train.n_rows())
        .map(|i| true_density_ratio(&data.train.x().row(i).transpose(), spec))
        .collect::<Result<_>>()?;
    Ok(Some(Weights::raw(raw)?))
}

/// `synthetic`: ratio-fidelity, correction-lift, and importance-sampling
/// identity reports on the synthetic benchmark, all oracle-anchored.
pub fn run_synthetic_benchmark(cfg: &ExperimentConfig, threads: usize) -> Result<RunManifest> {
    cfg.validate()?;
    if cfg.data.source != DataSource::Synthetic {
        return Err(Error::Config("the synthetic subcommand requires synthetic data".into()));
    }
    let out = ensure_out(cfg)?;
    let mut manifest = RunManifest::new("synthetic", cfg, threads);
    let data = prepare_data(cfg)?;
    let spec = data.synthetic_spec.as_ref().expect("synthetic source");
    let e = &cfg.experiment;
    let seed = e.seed;

    // -- ratio fidelity: Spearman of each estimator against the oracle
    let started = Instant::now();
    let oracle_raw = oracle_weights(&data)?.expect("synthetic source");
    let rel_oracle: Vec<f64> = (0..data.train.n_rows())
        .map(|i| {
            crate::shift_lab::true_relative_ratio(
                &data.train.x().row(i).transpose(),
                spec,
                RulsifConfig::default().alpha,
            )
        })
        .collect::<Result<_>>()?;
    let weight_sets = weights_for_corrections(cfg, &data.train, &data.test)?;
    let mut fidelity = String::from("estimator,spearman,n_train\n");
    for (correction, weights) in &weight_sets {
        let Some(w) = weights else { continue };
        let target: &[f64] = match correction {
            Correction::Rulsif => &rel_oracle,
            _ => oracle_raw.values(),
        };
        let rho = spearman(w.values(), target)?;
        fidelity.push_str(&format!(
            "{},{:.6},{}\n",
            correction.label(),
            rho,
            data.train.n_rows()
        ));
    }
    let fidelity_path = out.join("ratio_fidelity.csv");
    std::fs::write(&fidelity_path, fidelity)?;
    manifest.record_artifact("ratio_fidelity", &fidelity_path);
    manifest.record_timing("ratio_fidelity", started);

    // -- correction lift: test AUROC per family x correction + oracle row
    let started = Instant::now();
    let oracle_mean_one = oracle_raw.mean_one()?;
    let mut rows = Vec::new();
    for (fi, &family) in e.families.iter().enumerate() {
        let candidates = cfg.candidates(family);
        for (ci, (correction, weights)) in weight_sets.iter().enumerate() {
            let cell = cell_seed(seed, fi, 2 + ci as u64);
            let gs = grid_search(&data.train, &candidates, weights.as_ref(), e.cv_folds, cell)?;
            manifest.record_label_access("test_evaluation");
            rows.push(evaluate_cell(
                &data.train,
                &data.test,
                &gs.best_spec,
                weights.as_ref(),
                family,
                correction.label(),
                cfg,
                cell,
            )?);
        }
        let cell = cell_seed(seed, fi, 2 + weight_sets.len() as u64);
        let gs =
            grid_search(&data.train, &candidates, Some(&oracle_mean_one), e.cv_folds, cell)?;
        manifest.record_label_access("test_evaluation");
        rows.push(evaluate_cell(
            &data.train,
            &data.test,
            &gs.best_spec,
            Some(&oracle_mean_one),
            family,
            "oracle",
            cfg,
            cell,
        )?);
    }
    let lift_path = out.join("correction_lift.csv");
    write_reports(&lift_path, &rows)?;
    manifest.record_artifact("correction_lift", &lift_path);
    manifest.record_timing("correction_lift", started);

    // -- Eq. (2) Monte Carlo identity: oracle-weighted train risk vs direct
    // test risk for a fixed logistic model
    let started = Instant::now();
    let spec_fixed = LearnerSpec::Logistic(LogisticSpec::default());
    let model = learners::fit(
        &spec_fixed,
        data.train.x(),
        data.train.y(),
        &Weights::uniform(data.train.n_rows()),
        rng::child_seed(seed, 0xE902),
    )?;
    manifest.record_label_access("test_evaluation");
    let mut eq2 = String::from("loss,weighted_train_risk,test_risk,pooled_se,z\n");
    for loss in [Loss::Squared, Loss::Logloss] {
        let wtr = weighted_risk(&model, data.train.x(), data.train.y(), &oracle_raw, loss)?;
        let ter = weighted_risk(
            &model,
            data.test.x(),
            data.test.y(),
            &Weights::uniform(data.test.n_rows()),
            loss,
        )?;
        let se = eq2_pooled_se(&model, &data, &oracle_raw, loss)?;
        let z = (wtr - ter) / se;
        let name = match loss {
            Loss::Squared => "squared",
            Loss::Logloss => "logloss",
        };
        eq2.push_str(&format!("{name},{wtr:.6},{ter:.6},{se:.6},{z:.6}\n"));
    }
    let eq2_path = out.join("eq2_check.csv");
    std::fs::write(&eq2_path, eq2)?;
    manifest.record_artifact("eq2_check", &eq2_path);
    manifest.record_timing("eq2_check", started);

    manifest.write(&out)?;
    Ok(manifest)
}

fn per_sample_losses(
    model: &crate::learners::ModelArtifact,
    data: &Dataset,
    loss: Loss,
) -> Result<Vec<f64>> {
    let probs = model.predict_proba(data.x())?;
    Ok(data
        .y()
        .iter()
        .zip(probs.iter())
        .map(|(&y, &p)| match loss {
            Loss::Squared => (y as f64 - p).powi(2),
            Loss::Logloss => {
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
            }
        })
        .collect())
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

fn eq2_pooled_se(
    model: &crate::learners::ModelArtifact,
    data: &PreparedData,
    oracle: &Weights,
    loss: Loss,
) -> Result<f64> {
    let train_losses = per_sample_losses(model, &data.train, loss)?;
    let weighted: Vec<f64> = train_losses
        .iter()
        .zip(oracle.values())
        .map(|(&l, &w)| l * w)
        .collect();
    let test_losses = per_sample_losses(model, &data.test, loss)?;
    let (_, se_tr) = mean_se(&weighted);
    let (_, se_te) = mean_se(&test_losses);
    Ok((se_tr * se_tr + se_te * se_te).sqrt())
}

/// `ratios`: estimate and dump weights, one single-column CSV per
/// estimator, aligned to training rows (plus an oracle dump when the
/// analytic ratio exists).
pub fn run_ratios(cfg: &ExperimentConfig, threads: usize) -> Result<RunManifest> {
    cfg.validate()?;
    let out = ensure_out(cfg)?;
    let mut manifest = RunManifest::new("ratios", cfg, threads);
    let data = prepare_data(cfg)?;
    let started = Instant::now();
    let weight_sets = weights_for_corrections(cfg, &data.train, &data.test)?;
    let dump = |name: &str, w: &Weights, manifest: &mut RunManifest| -> Result<()> {
        let mut text = String::from("weight\n");
        for v in w.values() {
            text.push_str(&format!("{v:.9}\n"));
        }
        let path = out.join(format!("weights_{name}.csv"));
        std::fs::write(&path, text)?;
        manifest.record_artifact(&format!("weights_{name}"), &path);
        Ok(())
    };
    for (correction, weights) in &weight_sets {
        let Some(w) = weights else { continue };
        dump(correction.label(), w, &mut manifest)?;
    }
    if let Some(oracle) = oracle_weights(&data)? {
        dump("oracle", &oracle.mean_one()?, &mut manifest)?;
    }
    manifest.record_timing("ratios", started);
    manifest.write(&out)?;
    Ok(manifest)
}

/// `explain`: mean-|phi| Shapley summaries per (family, correction), plus a
/// fit-on-test reference per family.
pub fn run_explain(cfg: &ExperimentConfig, threads: usize) -> Result<RunManifest> {
    cfg.validate()?;
    let out = ensure_out(cfg)?;
    let mut manifest = RunManifest::new("explain", cfg, threads);
    let data = prepare_data(cfg)?;
    let e = &cfg.experiment;
    let seed = e.seed;

    let background = subsample(&data.train, cfg.explain.background_rows, rng::child_seed(seed, 0xBA0C))?;
    let features: Vec<String> = if cfg.explain.features.is_empty() {
        data.train.feature_names().to_vec()
    } else {
        cfg.explain.features.clone()
    };
    let mode = if data.train.n_features() <= MAX_EXACT_DIM {
        ShapleyMode::Exact
    } else {
        ShapleyMode::Sampled { permutations: 2000 }
    };

    let weight_sets = weights_for_corrections(cfg, &data.train, &data.test)?;
    let mut text = String::from("feature,mean_abs_phi,method\n");
    let push_summary = |text: &mut String, summary: &[f64], method: &str| {
        for (f, v) in features.iter().zip(summary) {
            text.push_str(&format!("{f},{v:.6},{method}\n"));
        }
    };
    for (fi, &family) in e.families.iter().enumerate() {
        let started = Instant::now();
        let candidates = cfg.candidates(family);
        for (ci, (correction, weights)) in weight_sets.iter().enumerate() {
            let cell = cell_seed(seed, fi, 2 + ci as u64);
            let gs = grid_search(&data.train, &candidates, weights.as_ref(), e.cv_folds, cell)?;
            let w = match weights {
                Some(w) => w.clone(),
                None => Weights::uniform(data.train.n_rows()),
            };
            let model = learners::fit(
                &gs.best_spec,
                data.train.x(),
                data.train.y(),
                &w,
                rng::child_seed(cell, 0),
            )?;
            let summary = mean_abs_shapley(
                &model,
                &data.test,
                &background,
                &features,
                mode,
                rng::child_seed(cell, 3),
            )?;
            push_summary(&mut text, &summary, &format!("{}_{}", family.label(), correction.label()));
        }
        // fit-on-test reference (the "Testing" group)
        let cell = cell_seed(seed, fi, 0x30);
        manifest.record_label_access("testing_reference_fit");
        let gs = grid_search(&data.test, &candidates, None, e.cv_folds, cell)?;
        let model = learners::fit(
            &gs.best_spec,
            data.test.x(),
            data.test.y(),
            &Weights::uniform(data.test.n_rows()),
            rng::child_seed(cell, 0),
        )?;
        let summary = mean_abs_shapley(
            &model,
            &data.test,
            &background,
            &features,
            mode,
            rng::child_seed(cell, 3),
        )?;
        push_summary(&mut text, &summary, &format!("{}_testing", family.label()));
        manifest.record_timing(&format!("family_{}", family.label()), started);
    }
    let path = out.join("shapley_summary.csv");
    std::fs::write(&path, text)?;
    manifest.record_artifact("shapley_summary", &path);
    manifest.write(&out)?;
    Ok(manifest)
}

fn subsample(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    use rand::seq::index::sample;
    if data.n_rows() <= n {
        return Ok(data.clone());
    }
    let mut rng = rng::stream(seed, 0xBA0C);
    let mut idx = sample(&mut rng, data.n_rows(), n).into_vec();
    idx.sort_unstable();
    data.select(&idx)
}
