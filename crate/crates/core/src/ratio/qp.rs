//! Box- and sum-constrained quadratic programming by accelerated projected
//! gradient. The feasible set is box ∩ sum-band; projection onto the
//! intersection uses Dykstra's alternating scheme, which converges to the
//! exact Euclidean projection for intersecting convex sets.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// False when the iteration cap was hit before stationarity.
    pub converged: bool,
    pub iterations: usize,
}

fn clamp_box(v: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].clamp(lower[i], upper[i]))
}

fn project_band(v: &DVector<f64>, s_lo: f64, s_hi: f64) -> DVector<f64> {
    let s = v.sum();
    let shift = if s < s_lo {
        (s_lo - s) / v.len() as f64
    } else if s > s_hi {
        (s_hi - s) / v.len() as f64
    } else {
        return v.clone();
    };
    v.add_scalar(shift)
}

/// Euclidean projection onto box ∩ sum-band.
fn project(
    v: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    band: Option<(f64, f64)>,
) -> DVector<f64> {
    let (s_lo, s_hi) = match band {
        None => return clamp_box(v, lower, upper),
        Some(b) => b,
    };
    let scale = v.amax().max(1.0);
    let mut z = v.clone();
    let mut p = DVector::zeros(v.len());
    let mut q = DVector::zeros(v.len());
    for _ in 0..2000 {
        let y1 = clamp_box(&(&z + &p), lower, upper);
        p = &z + &p - &y1;
        let y2 = project_band(&(&y1 + &q), s_lo, s_hi);
        q = &y1 + &q - &y2;
        // Dykstra converges to the exact projection; stop when the two
        // half-steps agree and the iterate has stabilized (feasibility
        // alone is not enough — the alternating-projection point differs
        // from the Euclidean projection)
        let cycle_gap = (&y1 - &y2).amax();
        let moved = (&y2 - &z).amax();
        z = y2;
        if cycle_gap <= 1e-13 * scale && moved <= 1e-13 * scale {
            break;
        }
    }
    z
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn spectral_norm(q: &DMatrix<f64>) -> f64 {
    let n = q.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut norm = 0.0;
    for _ in 0..100 {
        let w = q * &v;
        norm = w.norm();
        if norm <= 1e-300 {
            return 0.0;
        }
        v = w / norm;
    }
    norm
}

/// Minimize ½xᵀQx − cᵀx over {lower ≤ x ≤ upper, s_lo ≤ Σx ≤ s_hi}.
///
/// FISTA with adaptive restart and step 1/‖Q‖₂; terminates when the
/// projected-gradient map drops below `tol` (checked every few iterations).
/// Hitting `max_iter` returns the best iterate with `converged = false`.
pub fn solve_qp(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    band: Option<(f64, f64)>,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution> {
    let n = c.len();
    if q.nrows() != n || q.ncols() != n || lower.len() != n || upper.len() != n {
        return Err(Error::Config("QP dimensions disagree".into()));
    }
    if (0..n).any(|i| lower[i] > upper[i]) {
        return Err(Error::Config("QP box has lower > upper".into()));
    }
    if let Some((s_lo, s_hi)) = band {
        if s_lo > s_hi {
            return Err(Error::Config("QP sum band is empty".into()));
        }
        if lower.sum() > s_hi + 1e-12 || upper.sum() < s_lo - 1e-12 {
            return Err(Error::Config("QP box and sum band do not intersect".into()));
        }
    }
    if tol <= 0.0 || max_iter == 0 {
        return Err(Error::Config("QP tol and max_iter must be positive".into()));
    }
    let qs = (q + q.transpose()) * 0.5; // defensive symmetrization
    let lip = spectral_norm(&qs).max(1e-12);
    let step = 1.0 / lip;

    let mut x = project(&DVector::zeros(n), lower, upper, band);
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..max_iter {
        iterations = k + 1;
        let grad_y = &qs * &y - c;
        let x_next = project(&(&y - step * &grad_y), lower, upper, band);
        // adaptive restart: momentum pointing uphill resets acceleration
        if (&y - &x_next).dot(&(&x_next - &x)) > 0.0 {
            t = 1.0;
            y = x_next.clone();
        } else {
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = &x_next + ((t - 1.0) / t_next) * (&x_next - &x);
            t = t_next;
        }
        let moved = (&x_next - &x).amax() / step;
        x = x_next;
        if moved <= tol || k % 5 == 4 {
            // exact projected-gradient stationarity at x
            let grad_x = &qs * &x - c;
            let mapped = project(&(&x - step * &grad_x), lower, upper, band);
            if (&mapped - &x).amax() / step <= tol {
                converged = true;
                break;
            }
        }
    }
    Ok(QpSolution { x, converged, iterations })
}
