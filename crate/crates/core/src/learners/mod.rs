//! Weighted probabilistic binary classifiers sharing one fit/predict
//! contract: elastic-net logistic regression, random forest with weighted
//! Gini splits, and a small MLP.
//!
//! Weights are rescaled to mean one before entering the loss, so fits are
//! invariant to positive rescaling of the weight vector and penalty
//! strengths stay comparable across weight sources.

mod forest;
mod logistic;
mod mlp;

pub use forest::{ForestModel, ForestSpec, Tree, TreeNode};
pub use logistic::{LogisticModel, LogisticSpec};
pub use mlp::{MlpModel, MlpSpec};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratio::Weights;

/// Model family plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LearnerSpec {
    Logistic(LogisticSpec),
    RandomForest(ForestSpec),
    Mlp(MlpSpec),
}

impl LearnerSpec {
    pub fn family_name(&self) -> &'static str {
        match self {
            LearnerSpec::Logistic(_) => "logistic",
            LearnerSpec::RandomForest(_) => "random_forest",
            LearnerSpec::Mlp(_) => "mlp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LearnerSpec::Logistic(s) => s.validate(),
            LearnerSpec::RandomForest(s) => s.validate(),
            LearnerSpec::Mlp(s) => s.validate(),
        }
    }
}

/// A fitted model. Versioned for serialization (see `to_json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelArtifact {
    Logistic(LogisticModel),
    RandomForest(ForestModel),
    Mlp(MlpModel),
}

/// Serialization wrapper carrying a format version.
#[derive(Debug, Serialize, Deserialize)]
struct VersionedArtifact {
    format_version: u32,
    model: ModelArtifact,
}

const ARTIFACT_FORMAT_VERSION: u32 = 1;

impl ModelArtifact {
    /// Predicted positive-class probabilities, one per row of `x`.
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let expected = self.n_features();
        if x.ncols() != expected {
            return Err(Error::Data(format!(
                "predict input has {} features, model expects {expected}",
                x.ncols()
            )));
        }
        Ok(match self {
            ModelArtifact::Logistic(m) => m.predict_proba(x),
            ModelArtifact::RandomForest(m) => m.predict_proba(x),
            ModelArtifact::Mlp(m) => m.predict_proba(x),
        })
    }

    pub fn n_features(&self) -> usize {
        match self {
            ModelArtifact::Logistic(m) => m.beta.len(),
            ModelArtifact::RandomForest(m) => m.n_features,
            ModelArtifact::Mlp(m) => m.n_features(),
        }
    }

    /// Set when the fit degenerated (e.g. single-class labels).
    pub fn warning(&self) -> bool {
        match self {
            ModelArtifact::Logistic(m) => m.warning,
            ModelArtifact::RandomForest(m) => m.warning,
            ModelArtifact::Mlp(m) => m.warning,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VersionedArtifact {
            format_version: ARTIFACT_FORMAT_VERSION,
            model: self.clone(),
        })
        .expect("artifact serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<ModelArtifact> {
        let v: VersionedArtifact =
            serde_json::from_str(s).map_err(|e| Error::Data(format!("bad model artifact: {e}")))?;
        if v.format_version != ARTIFACT_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported artifact format version {}",
                v.format_version
            )));
        }
        Ok(v.model)
    }
}

/// Fit a model with per-sample importance weights.
pub fn fit(
    spec: &LearnerSpec,
    x: &DMatrix<f64>,
    y: &[u8],
    weights: &Weights,
    seed: u64,
) -> Result<ModelArtifact> {
    spec.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::Data(format!(
            "{} rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if weights.len() != y.len() {
        return Err(Error::Data(format!(
            "{} weights but {} samples",
            weights.len(),
            y.len()
        )));
    }
    let w = weights.mean_one_values()?;
    Ok(match spec {
        LearnerSpec::Logistic(s) => ModelArtifact::Logistic(logistic::fit(s, x, y, &w)?),
        LearnerSpec::RandomForest(s) => ModelArtifact::RandomForest(forest::fit(s, x, y, &w, seed)?),
        LearnerSpec::Mlp(s) => ModelArtifact::Mlp(mlp::fit(s, x, y, &w, seed)?),
    })
}

/// Coefficients of a fitted logistic model.
pub fn logistic_coefficients(model: &ModelArtifact) -> Result<(&DVector<f64>, f64)> {
    match model {
        ModelArtifact::Logistic(m) => Ok((&m.beta, m.intercept)),
        _ => Err(Error::Data("model is not a logistic regression".into())),
    }
}

/// Per-feature importance of a fitted forest: total weighted impurity
/// decrease, normalized to sum one.
pub fn forest_importance(model: &ModelArtifact) -> Result<Vec<f64>> {
    match model {
        ModelArtifact::RandomForest(m) => m.importance(),
        _ => Err(Error::Data("model is not a random forest".into())),
    }
}

/// Weighted objective value and analytic parameter gradient of an MLP
/// (enables finite-difference verification).
pub fn mlp_loss_gradient(
    model: &ModelArtifact,
    x: &DMatrix<f64>,
    y: &[u8],
    weights: &Weights,
) -> Result<(f64, mlp::MlpGradient)> {
    match model {
        ModelArtifact::Mlp(m) => {
            let w = weights.mean_one_values()?;
            Ok(m.loss_gradient(x, y, &w))
        }
        _ => Err(Error::Data("model is not an MLP".into())),
    }
}

pub(crate) fn single_class(y: &[u8]) -> bool {
    y.iter().all(|&v| v == y[0])
}

pub(crate) fn weighted_positive_rate(y: &[u8], w: &[f64]) -> f64 {
    let num: f64 = y.iter().zip(w).map(|(&l, &wi)| l as f64 * wi).sum();
    let den: f64 = w.iter().sum();
    num / den
}
