//! Elastic-net logistic regression fit by proximal gradient with
//! backtracking. The L2 term lives in the smooth part; the L1 term is
//! handled exactly by soft-thresholding. The intercept is unpenalized.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticSpec {
    pub l1: f64,
    pub l2: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticSpec {
    fn default() -> Self {
        LogisticSpec { l1: 1e-3, l2: 1e-3, tol: 1e-8, max_iter: 20_000 }
    }
}

impl LogisticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.l1 < 0.0 || self.l2 < 0.0 {
            return Err(Error::Config("logistic penalties must be nonnegative".into()));
        }
        if self.tol <= 0.0 || self.max_iter == 0 {
            return Err(Error::Config("logistic tol and max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticModel {
    pub beta: DVector<f64>,
    pub intercept: f64,
    pub warning: bool,
}

impl LogisticModel {
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let scores = x * &self.beta;
        DVector::from_fn(x.nrows(), |i, _| sigmoid(scores[i] + self.intercept))
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z), overflow-safe.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Weighted mean log loss plus the L2 term (the smooth objective part).
fn smooth_objective(x: &DMatrix<f64>, y: &[u8], w: &[f64], beta: &DVector<f64>, b: f64, l2: f64) -> f64 {
    let n = y.len() as f64;
    let scores = x * beta;
    let mut loss = 0.0;
    for i in 0..y.len() {
        let s = scores[i] + b;
        loss += w[i] * (softplus(s) - y[i] as f64 * s);
    }
    loss / n + 0.5 * l2 * beta.norm_squared()
}

/// Gradient of the smooth part w.r.t. (beta, intercept).
fn smooth_gradient(
    x: &DMatrix<f64>,
    y: &[u8],
    w: &[f64],
    beta: &DVector<f64>,
    b: f64,
    l2: f64,
) -> (DVector<f64>, f64) {
    let n = y.len() as f64;
    let scores = x * beta;
    let mut residual = DVector::zeros(y.len());
    for i in 0..y.len() {
        residual[i] = w[i] * (sigmoid(scores[i] + b) - y[i] as f64);
    }
    let grad_beta = x.transpose() * &residual / n + l2 * beta;
    let grad_b = residual.sum() / n;
    (grad_beta, grad_b)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub(super) fn fit(spec: &LogisticSpec, x: &DMatrix<f64>, y: &[u8], w: &[f64]) -> Result<LogisticModel> {
    if super::single_class(y) {
        let rate = (y[0] as f64).clamp(1e-9, 1.0 - 1e-9);
        return Ok(LogisticModel {
            beta: DVector::zeros(x.ncols()),
            intercept: (rate / (1.0 - rate)).ln(),
            warning: true,
        });
    }
    let mut beta = DVector::zeros(x.ncols());
    let mut b = 0.0;
    let mut step = 1.0;
    for _ in 0..spec.max_iter {
        let f0 = smooth_objective(x, y, w, &beta, b, spec.l2);
        let (gb, gi) = smooth_gradient(x, y, w, &beta, b, spec.l2);
        // backtracking on the smooth majorization
        let (next_beta, next_b) = loop {
            let cand_beta = DVector::from_fn(beta.len(), |j, _| {
                soft_threshold(beta[j] - step * gb[j], step * spec.l1)
            });
            let cand_b = b - step * gi;
            let db = &cand_beta - &beta;
            let dbi = cand_b - b;
            let quad = f0 + gb.dot(&db) + gi * dbi + (db.norm_squared() + dbi * dbi) / (2.0 * step);
            let f1 = smooth_objective(x, y, w, &cand_beta, cand_b, spec.l2);
            if f1 <= quad + 1e-12 * f0.abs().max(1.0) {
                break (cand_beta, cand_b);
            }
            step *= 0.5;
            if step < 1e-16 {
                return Err(Error::Numerical("logistic line search collapsed".into()));
            }
        };
        let gap = ((&next_beta - &beta).norm_squared() + (next_b - b).powi(2)).sqrt() / step;
        beta = next_beta;
        b = next_b;
        if gap <= spec.tol {
            break;
        }
        step *= 1.2; // re-expand after successful step
    }
    Ok(LogisticModel { beta, intercept: b, warning: false })
}
