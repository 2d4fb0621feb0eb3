//! Covariate-shift correction toolkit.
//!
//! Estimates train-to-test density ratios (kernel mean matching, RuLSIF,
//! train-vs-test probabilistic classifiers), trains importance-weighted
//! classifiers (elastic-net logistic regression, random forest, MLP), and
//! runs shift experiments: spectral-clustering splits, synthetic benchmarks
//! with analytic oracle ratios, prior-shift and concept-shift controls,
//! AUROC/Brier evaluation with intervals, and Shapley attribution.

pub mod data_model;
pub mod error;
pub mod eval;
pub mod explain;
pub mod learners;
pub mod ratio;
pub mod rng;
pub mod runner;
pub mod shift_lab;

pub use data_model::{Dataset, HourlyGrid, NormStats, RawRecords};
pub use error::{Error, Result};
pub use ratio::Weights;
