//! Python bindings: a thin functional surface over the covshift crate.
//! Matrices cross the boundary as row-major lists of lists; every function
//! is deterministic given its seed.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use covshift::eval;
use covshift::explain::{self, ShapleyMode};
use covshift::learners::{self, ForestSpec, LearnerSpec, LogisticSpec, MlpSpec};
use covshift::ratio::{
    classifier_weights, kmm_weights, rulsif_weights, ClassifierKind, ClassifierRatioConfig,
    KmmConfig, RulsifConfig,
};
use covshift::shift_lab::{make_synthetic_shift, SyntheticShiftSpec};
use covshift::{Dataset, Error, Weights};

fn to_py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err(format!("{what} must be nonempty")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("{what} rows must share a positive width")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), d, rows.iter().flatten().copied()))
}

fn to_weights(values: Option<Vec<f64>>, n: usize) -> PyResult<Weights> {
    match values {
        Some(v) => {
            if v.len() != n {
                return Err(PyValueError::new_err("weights length must match training rows"));
            }
            Weights::raw(v).and_then(|w| w.mean_one()).map_err(to_py_err)
        }
        None => Ok(Weights::uniform(n)),
    }
}

fn parse_family(family: &str) -> PyResult<LearnerSpec> {
    match family {
        "logistic" => Ok(LearnerSpec::Logistic(LogisticSpec::default())),
        "random_forest" => Ok(LearnerSpec::RandomForest(ForestSpec::default())),
        "mlp" => Ok(LearnerSpec::Mlp(MlpSpec::default())),
        _ => Err(PyValueError::new_err(format!(
            "unknown family '{family}' (expected logistic, random_forest, or mlp)"
        ))),
    }
}

/// Estimate mean-one importance weights for the training rows.
/// method: "kmm", "rulsif", "classifier_lr", or "classifier_rf".
#[pyfunction]
#[pyo3(signature = (method, train_x, test_x, seed = 0))]
fn estimate_weights(
    method: &str,
    train_x: Vec<Vec<f64>>,
    test_x: Vec<Vec<f64>>,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let tr = to_matrix(&train_x, "train_x")?;
    let te = to_matrix(&test_x, "test_x")?;
    let w = match method {
        "kmm" => kmm_weights(&tr, &te, &KmmConfig::default(), seed),
        "rulsif" => rulsif_weights(&tr, &te, &RulsifConfig::default(), seed),
        "classifier_lr" => {
            classifier_weights(&tr, &te, &ClassifierRatioConfig::default(), seed)
        }
        "classifier_rf" => classifier_weights(
            &tr,
            &te,
            &ClassifierRatioConfig {
                kind: ClassifierKind::RandomForest,
                ..ClassifierRatioConfig::default()
            },
            seed,
        ),
        _ => {
            return Err(PyValueError::new_err(format!(
                "unknown method '{method}' (expected kmm, rulsif, classifier_lr, classifier_rf)"
            )));
        }
    }
    .map_err(to_py_err)?;
    Ok(w.values().to_vec())
}

/// Fit a learner on (train_x, train_y) with optional importance weights and
/// return predicted positive-class probabilities on test_x.
#[pyfunction]
#[pyo3(signature = (family, train_x, train_y, test_x, weights = None, seed = 0))]
fn fit_predict(
    family: &str,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<u8>,
    test_x: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let spec = parse_family(family)?;
    let tr = to_matrix(&train_x, "train_x")?;
    let te = to_matrix(&test_x, "test_x")?;
    let w = to_weights(weights, tr.nrows())?;
    let model = learners::fit(&spec, &tr, &train_y, &w, seed).map_err(to_py_err)?;
    let probs = model.predict_proba(&te).map_err(to_py_err)?;
    Ok(probs.as_slice().to_vec())
}

/// Area under the ROC curve (ties get half credit).
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::auroc(&scores, &labels).map_err(to_py_err)
}

/// Brier score (mean squared error of probabilities).
#[pyfunction]
fn brier(probs: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::brier(&probs, &labels).map_err(to_py_err)
}

/// Spearman rank correlation.
#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::spearman(&a, &b).map_err(to_py_err)
}

/// Exact Shapley attribution of a freshly fitted model at one query point,
/// against the training rows as background. Returns (phi, base, prediction).
#[pyfunction]
#[pyo3(signature = (family, train_x, train_y, query, weights = None, seed = 0))]
fn shapley(
    family: &str,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<u8>,
    query: Vec<f64>,
    weights: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<(Vec<f64>, f64, f64)> {
    let spec = parse_family(family)?;
    let tr = to_matrix(&train_x, "train_x")?;
    let w = to_weights(weights, tr.nrows())?;
    let model = learners::fit(&spec, &tr, &train_y, &w, seed).map_err(to_py_err)?;
    let names = (0..tr.ncols()).map(|j| format!("x{j}")).collect();
    let background = Dataset::new(tr, train_y, names).map_err(to_py_err)?;
    let q = DVector::from_vec(query);
    let res = explain::shapley_values(&model, &background, &q, ShapleyMode::Exact, seed)
        .map_err(to_py_err)?;
    Ok((res.phi.as_slice().to_vec(), res.base, res.prediction))
}

/// Sample the built-in synthetic covariate-shift benchmark.
/// benchmark: "sign_flip", "gaussian_1d", or "no_shift".
/// Returns (train_x, train_y, test_x, test_y).
#[pyfunction]
#[pyo3(signature = (benchmark, n_train, n_test, seed = 0))]
fn synthetic_benchmark(
    benchmark: &str,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<u8>, Vec<Vec<f64>>, Vec<u8>)> {
    let spec = match benchmark {
        "sign_flip" => SyntheticShiftSpec::default_benchmark(seed),
        "gaussian_1d" => SyntheticShiftSpec::gaussian_1d_shift(seed),
        "no_shift" => {
            let mut s = SyntheticShiftSpec::default_benchmark(seed);
            s.test = s.train.clone();
            s
        }
        _ => {
            return Err(PyValueError::new_err(format!(
                "unknown benchmark '{benchmark}' (expected sign_flip, gaussian_1d, no_shift)"
            )));
        }
    };
    let (train, test) = make_synthetic_shift(&spec, n_train, n_test).map_err(to_py_err)?;
    let rows = |d: &Dataset| -> Vec<Vec<f64>> {
        (0..d.n_rows()).map(|i| d.x().row(i).iter().copied().collect()).collect()
    };
    Ok((rows(&train), train.y().to_vec(), rows(&test), test.y().to_vec()))
}

#[pymodule]
fn covshift_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(estimate_weights, m)?)?;
    m.add_function(wrap_pyfunction!(fit_predict, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(brier, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(shapley, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_benchmark, m)?)?;
    Ok(())
}
