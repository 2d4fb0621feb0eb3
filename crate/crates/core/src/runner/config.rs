//! Versioned TOML experiment configuration.
//!
//! Every section has defaults, so `covshift synthetic` with no `--config`
//! runs the built-in benchmark end to end. Unknown keys are rejected to
//! catch typos early.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{ForestSpec, LearnerSpec, LogisticSpec, MlpSpec};

/// Current config schema. Bump when a key changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

/// Importance-weight source for a report row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    None,
    Kmm,
    Rulsif,
    ClassifierLr,
    ClassifierRf,
}

impl Correction {
    pub const ALL: [Correction; 5] = [
        Correction::None,
        Correction::Kmm,
        Correction::Rulsif,
        Correction::ClassifierLr,
        Correction::ClassifierRf,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Correction::None => "none",
            Correction::Kmm => "kmm",
            Correction::Rulsif => "rulsif",
            Correction::ClassifierLr => "classifier_lr",
            Correction::ClassifierRf => "classifier_rf",
        }
    }
}

/// Learner family evaluated in the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logistic,
    RandomForest,
    Mlp,
}

impl Family {
    pub fn label(&self) -> &'static str {
        match self {
            Family::Logistic => "logistic",
            Family::RandomForest => "random_forest",
            Family::Mlp => "mlp",
        }
    }
}

/// How report intervals are computed: percentile bootstrap over the test
/// predictions, or min/max over refits with distinct seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMode {
    Bootstrap,
    Seeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cohort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Covariate shift baked into the synthetic generator.
    Synthetic,
    /// Spectral clustering on a feature pair of a cohort snapshot.
    Spectral,
    /// A `row_index,role` CSV supplied by the user.
    Provided,
}

/// Which synthetic generator backs `source = "synthetic"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    /// Nonlinear truth whose optimal linear direction flips under the shift;
    /// the default correction-lift benchmark.
    SignFlip,
    /// 1-D Gaussian mean shift with an analytic ratio.
    #[serde(rename = "gaussian_1d")]
    Gaussian1d,
    /// Identical train/test distributions (calibration checks).
    NoShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Long-format cohort CSV; required when `source = "cohort"`.
    pub cohort_path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { source: DataSource::Synthetic, cohort_path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSection {
    pub kind: ShiftKind,
    /// Features clustered by the spectral split.
    pub feature_pair: Option<[String; 2]>,
    /// Split CSV; required when `kind = "provided"`.
    pub split_path: Option<PathBuf>,
    pub benchmark: Benchmark,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for ShiftSection {
    fn default() -> Self {
        ShiftSection {
            kind: ShiftKind::Synthetic,
            feature_pair: None,
            split_path: None,
            benchmark: Benchmark::SignFlip,
            n_train: 500,
            n_test: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub corrections: Vec<Correction>,
    pub families: Vec<Family>,
    /// Master seed; every random stream in a run derives from it.
    pub seed: u64,
    pub cv_folds: usize,
    pub interval: IntervalMode,
    /// Bootstrap resample count (interval = "bootstrap").
    pub n_boot: usize,
    /// Two-sided interval coverage.
    pub level: f64,
    /// Refit count (interval = "seeds").
    pub refits: usize,
    pub out: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            corrections: Correction::ALL.to_vec(),
            families: vec![Family::Logistic, Family::RandomForest],
            seed: 0,
            cv_folds: 5,
            interval: IntervalMode::Bootstrap,
            n_boot: 200,
            level: 0.95,
            refits: 10,
            out: PathBuf::from("out"),
        }
    }
}

/// Hyperparameter grids, expanded to `LearnerSpec` candidates per family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Cross product over l1 and l2.
    pub logistic_penalties: Vec<f64>,
    pub forest_trees: Vec<usize>,
    /// 0 means unlimited depth.
    pub forest_depths: Vec<usize>,
    pub mlp_learning_rates: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            logistic_penalties: vec![0.0, 1e-3, 1e-2, 1e-1],
            forest_trees: vec![100, 300],
            forest_depths: vec![4, 8, 0],
            mlp_learning_rates: vec![0.01, 0.001],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    /// Target positive rates for the rebalanced test sets.
    pub rates: Vec<f64>,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection { rates: vec![0.459, 0.556] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    /// Background sample size drawn from the training set.
    pub background_rows: usize,
    /// Features to summarize; all features when empty.
    pub features: Vec<String>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection { background_rows: 100, features: Vec::new() }
    }
}

/// Root of the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataSection,
    pub shift: ShiftSection,
    pub experiment: ExperimentSection,
    pub grids: GridSection,
    pub prior: PriorSection,
    pub explain: ExplainSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            data: DataSection::default(),
            shift: ShiftSection::default(),
            experiment: ExperimentSection::default(),
            grids: GridSection::default(),
            prior: PriorSection::default(),
            explain: ExplainSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let e = &self.experiment;
        if e.corrections.is_empty() {
            return Err(Error::Config("corrections list must be nonempty".into()));
        }
        if e.families.is_empty() {
            return Err(Error::Config("families list must be nonempty".into()));
        }
        for (i, c) in e.corrections.iter().enumerate() {
            if e.corrections[..i].contains(c) {
                return Err(Error::Config(format!("duplicate correction '{}'", c.label())));
            }
        }
        for (i, f) in e.families.iter().enumerate() {
            if e.families[..i].contains(f) {
                return Err(Error::Config(format!("duplicate family '{}'", f.label())));
            }
        }
        if e.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        if !(0.0 < e.level && e.level < 1.0) {
            return Err(Error::Config("interval level must lie in (0, 1)".into()));
        }
        if e.n_boot == 0 {
            return Err(Error::Config("n_boot must be positive".into()));
        }
        if e.refits < 2 {
            return Err(Error::Config("seed intervals need at least 2 refits".into()));
        }
        let g = &self.grids;
        if g.logistic_penalties.is_empty()
            || g.forest_trees.is_empty()
            || g.forest_depths.is_empty()
            || g.mlp_learning_rates.is_empty()
        {
            return Err(Error::Config("hyperparameter grids must be nonempty".into()));
        }
        if g.logistic_penalties.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::Config("logistic penalties must be nonnegative".into()));
        }
        if g.forest_trees.contains(&0) {
            return Err(Error::Config("forest tree counts must be positive".into()));
        }
        if g.mlp_learning_rates.iter().any(|&r| !r.is_finite() || r <= 0.0) {
            return Err(Error::Config("mlp learning rates must be positive".into()));
        }
        if self.prior.rates.is_empty()
            || self.prior.rates.iter().any(|&r| !(0.0 < r && r < 1.0))
        {
            return Err(Error::Config("prior rates must be a nonempty list within (0, 1)".into()));
        }
        if self.explain.background_rows == 0 {
            return Err(Error::Config("explain background_rows must be positive".into()));
        }
        if self.shift.n_train == 0 || self.shift.n_test == 0 {
            return Err(Error::Config("synthetic sample sizes must be positive".into()));
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.shift.kind != ShiftKind::Synthetic {
                    return Err(Error::Config(
                        "synthetic data uses the synthetic shift generator".into(),
                    ));
                }
            }
            DataSource::Cohort => {
                let path = self.data.cohort_path.as_ref().ok_or_else(|| {
                    Error::Config("cohort source requires data.cohort_path".into())
                })?;
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "cohort file {} does not exist",
                        path.display()
                    )));
                }
                match self.shift.kind {
                    ShiftKind::Synthetic => {
                        return Err(Error::Config(
                            "cohort data needs shift.kind spectral or provided".into(),
                        ));
                    }
                    ShiftKind::Spectral => {
                        if self.shift.feature_pair.is_none() {
                            return Err(Error::Config(
                                "spectral shift requires shift.feature_pair".into(),
                            ));
                        }
                    }
                    ShiftKind::Provided => {
                        let split = self.shift.split_path.as_ref().ok_or_else(|| {
                            Error::Config("provided shift requires shift.split_path".into())
                        })?;
                        if !split.exists() {
                            return Err(Error::Config(format!(
                                "split file {} does not exist",
                                split.display()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Expand the grid section into candidate specs for one family.
    pub fn candidates(&self, family: Family) -> Vec<LearnerSpec> {
        match family {
            Family::Logistic => {
                let mut out = Vec::new();
                for &l1 in &self.grids.logistic_penalties {
                    for &l2 in &self.grids.logistic_penalties {
                        out.push(LearnerSpec::Logistic(LogisticSpec {
                            l1,
                            l2,
                            ..LogisticSpec::default()
                        }));
                    }
                }
                out
            }
            Family::RandomForest => {
                let mut out = Vec::new();
                for &n_trees in &self.grids.forest_trees {
                    for &depth in &self.grids.forest_depths {
                        out.push(LearnerSpec::RandomForest(ForestSpec {
                            n_trees,
                            max_depth: if depth == 0 { None } else { Some(depth) },
                            ..ForestSpec::default()
                        }));
                    }
                }
                out
            }
            Family::Mlp => self
                .grids
                .mlp_learning_rates
                .iter()
                .map(|&lr| {
                    LearnerSpec::Mlp(MlpSpec { learning_rate: lr, ..MlpSpec::default() })
                })
                .collect(),
        }
    }
}
