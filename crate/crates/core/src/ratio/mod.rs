//! Train-to-test density-ratio estimation: kernel mean matching (a box- and
//! sum-constrained QP), RuLSIF (analytic relative ratio over a Gaussian
//! basis), and classifier-based odds. All estimators emit per-training-row
//! weights normalized to mean one before downstream training.

pub mod qp;

pub use qp::{solve_qp, QpSolution};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{self, ForestSpec, LearnerSpec, LogisticSpec};
use crate::rng;
use crate::Dataset;

/// Whether a weight vector has been rescaled to mean one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormTag {
    Raw,
    MeanOne,
}

/// Nonnegative per-training-sample importance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    values: Vec<f64>,
    tag: NormTag,
}

impl Weights {
    /// Wrap raw estimates; rejects negative or non-finite entries.
    pub fn raw(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("empty weight vector".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(
                "weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Weights { values, tag: NormTag::Raw })
    }

    /// All-ones weights (already mean one).
    pub fn uniform(n: usize) -> Self {
        Weights { values: vec![1.0; n], tag: NormTag::MeanOne }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tag(&self) -> NormTag {
        self.tag
    }

    /// Rescale to mean one. A constant positive vector maps to exact ones,
    /// so uniform weighting is bit-identical to unweighted fitting.
    pub fn mean_one(&self) -> Result<Weights> {
        Ok(Weights { values: self.mean_one_values()?, tag: NormTag::MeanOne })
    }

    pub fn mean_one_values(&self) -> Result<Vec<f64>> {
        let first = self.values[0];
        if first > 0.0 && self.values.iter().all(|&v| v == first) {
            return Ok(vec![1.0; self.values.len()]);
        }
        let mean = self.values.iter().sum::<f64>() / self.values.len() as f64;
        if mean <= 0.0 {
            return Err(Error::Numerical("cannot normalize all-zero weights".into()));
        }
        Ok(self.values.iter().map(|v| v / mean).collect())
    }
}

/// Rescale weights to mean one (errors on an all-zero vector).
pub fn normalize_weights(w: &Weights) -> Result<Weights> {
    w.mean_one()
}

/// Median pairwise Euclidean distance, subsampled to at most 2000 rows for
/// large inputs (seeded). Errors when all points coincide.
pub fn median_heuristic_bandwidth(x: &DMatrix<f64>, seed: u64) -> Result<f64> {
    use rand::seq::index::sample;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Data("bandwidth heuristic needs at least 2 rows".into()));
    }
    let rows: Vec<usize> = if n > 2000 {
        let mut rng = rng::stream(seed, 0x0BA0);
        sample(&mut rng, n, 2000).into_vec()
    } else {
        (0..n).collect()
    };
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            let mut d2 = 0.0;
            for k in 0..x.ncols() {
                let d = x[(i, k)] - x[(j, k)];
                d2 += d * d;
            }
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        (dists[m / 2 - 1] + dists[m / 2]) / 2.0
    };
    if median <= 0.0 {
        return Err(Error::Data("all points identical; bandwidth undefined".into()));
    }
    Ok(median)
}

/// RBF kernel matrix k(aᵢ, bⱼ) = exp(−‖aᵢ − bⱼ‖² / (2σ²)).
pub(crate) fn rbf_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut d2 = 0.0;
        for k in 0..a.ncols() {
            let d = a[(i, k)] - b[(j, k)];
            d2 += d * d;
        }
        (-d2 * inv).exp()
    })
}

fn check_shapes(train_x: &DMatrix<f64>, test_x: &DMatrix<f64>) -> Result<()> {
    if train_x.nrows() == 0 || test_x.nrows() == 0 {
        return Err(Error::Data("empty train or test set".into()));
    }
    if train_x.ncols() != test_x.ncols() {
        return Err(Error::Data(format!(
            "train has {} features, test has {}",
            train_x.ncols(),
            test_x.ncols()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Kernel mean matching

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmmConfig {
    /// RBF bandwidth; `None` uses the median heuristic on the combined set.
    pub sigma: Option<f64>,
    /// Box bound B on raw weights.
    pub b: f64,
    /// Mean-constraint slack; `None` uses (√n − 1)/√n.
    pub eps: Option<f64>,
    /// Strength of a (ridge/2)·‖w − 1‖² Tikhonov term that conditions the
    /// near-singular Gram QP and pulls weights toward the no-shift solution.
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KmmConfig {
    fn default() -> Self {
        KmmConfig {
            sigma: None,
            b: 1000.0,
            eps: None,
            ridge: 1.0,
            tol: 1e-6,
            max_iter: 50_000,
        }
    }
}

impl KmmConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.sigma {
            if s <= 0.0 {
                return Err(Error::Config("KMM sigma must be positive".into()));
            }
        }
        if self.b <= 1.0 {
            return Err(Error::Config("KMM box bound B must exceed 1".into()));
        }
        if self.eps.is_some_and(|e| e < 0.0) {
            return Err(Error::Config("KMM epsilon must be nonnegative".into()));
        }
        if self.ridge < 0.0 {
            return Err(Error::Config("KMM ridge must be nonnegative".into()));
        }
        if self.tol <= 0.0 || self.max_iter == 0 {
            return Err(Error::Config("KMM tol and max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// KMM weights before normalization, with the solver's convergence flag.
pub fn kmm_raw_weights(
    train_x: &DMatrix<f64>,
    test_x: &DMatrix<f64>,
    cfg: &KmmConfig,
    seed: u64,
) -> Result<(Weights, bool)> {
    cfg.validate()?;
    check_shapes(train_x, test_x)?;
    let n_tr = train_x.nrows();
    let n_te = test_x.nrows();
    let sigma = match cfg.sigma {
        Some(s) => s,
        None => {
            let mut combined = DMatrix::zeros(n_tr + n_te, train_x.ncols());
            combined.rows_mut(0, n_tr).copy_from(train_x);
            combined.rows_mut(n_tr, n_te).copy_from(test_x);
            median_heuristic_bandwidth(&combined, seed)?
        }
    };
    let mut q = rbf_kernel(train_x, train_x, sigma);
    for i in 0..n_tr {
        q[(i, i)] += cfg.ridge;
    }
    let cross = rbf_kernel(train_x, test_x, sigma);
    let scale = n_tr as f64 / n_te as f64;
    // the ridge contributes ridge·I above and ridge·1 here, i.e. the
    // objective gains (ridge/2)·‖w − 1‖² up to a constant
    let c = DVector::from_fn(n_tr, |i, _| scale * cross.row(i).sum() + cfg.ridge);
    let eps = cfg
        .eps
        .unwrap_or_else(|| ((n_tr as f64).sqrt() - 1.0) / (n_tr as f64).sqrt());
    let band = (n_tr as f64 * (1.0 - eps), n_tr as f64 * (1.0 + eps));
    let lower = DVector::zeros(n_tr);
    let upper = DVector::from_element(n_tr, cfg.b);
    let sol = solve_qp(&q, &c, &lower, &upper, Some(band), cfg.tol, cfg.max_iter)?;
    let w = sol.x.iter().map(|v| v.max(0.0)).collect();
    Ok((Weights::raw(w)?, sol.converged))
}

/// Mean-one KMM weights for the training rows.
pub fn kmm_weights(
    train_x: &DMatrix<f64>,
    test_x: &DMatrix<f64>,
    cfg: &KmmConfig,
    seed: u64,
) -> Result<Weights> {
    let (raw, _) = kmm_raw_weights(train_x, test_x, cfg, seed)?;
    raw.mean_one()
}

// ---------------------------------------------------------------------------
// RuLSIF

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RulsifConfig {
    /// Relative parameter α in [0, 1).
    pub alpha: f64,
    pub lambda_grid: Vec<f64>,
    /// Multipliers applied to the base bandwidth.
    pub sigma_scale_grid: Vec<f64>,
    /// Base bandwidth; `None` uses the median heuristic on the combined set.
    pub sigma: Option<f64>,
    pub n_centers: usize,
    pub cv_folds: usize,
}

impl Default for RulsifConfig {
    fn default() -> Self {
        RulsifConfig {
            alpha: 0.1,
            lambda_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
            sigma_scale_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            sigma: None,
            n_centers: 100,
            cv_folds: 5,
        }
    }
}

impl RulsifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config("RuLSIF alpha must lie in [0, 1)".into()));
        }
        if self.lambda_grid.is_empty() || self.sigma_scale_grid.is_empty() {
            return Err(Error::Config("RuLSIF grids must be nonempty".into()));
        }
        if self.lambda_grid.iter().any(|&l| l < 1e-9) {
            return Err(Error::Config("RuLSIF lambda grid must stay >= 1e-9".into()));
        }
        if self.sigma_scale_grid.iter().any(|&s| s <= 0.0) || self.sigma.is_some_and(|s| s <= 0.0) {
            return Err(Error::Config("RuLSIF bandwidths must be positive".into()));
        }
        if self.n_centers == 0 || self.cv_folds < 2 {
            return Err(Error::Config("RuLSIF needs centers >= 1 and folds >= 2".into()));
        }
        Ok(())
    }
}

/// Gaussian basis over `centers` plus a constant function, so the uniform
/// ratio r ≡ 1 is exactly representable (keeps no-shift estimates flat).
fn rulsif_basis(x: &DMatrix<f64>, centers: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let rbf = rbf_kernel(x, centers, sigma);
    let mut phi = DMatrix::zeros(x.nrows(), centers.nrows() + 1);
    phi.columns_mut(0, centers.nrows()).copy_from(&rbf);
    phi.column_mut(centers.nrows()).fill(1.0);
    phi
}

/// Analytic RuLSIF solve for fixed (λ, σ): θ̂ = (Ĥ + λI)⁻¹ ĥ with
/// Ĥ = α·E_test[φφᵀ] + (1−α)·E_train[φφᵀ] and ĥ = E_test[φ], where φ is the
/// Gaussian basis over `centers` plus a constant term.
pub fn rulsif_solve(
    train_x: &DMatrix<f64>,
    test_x: &DMatrix<f64>,
    centers: &DMatrix<f64>,
    lambda: f64,
    sigma: f64,
    alpha: f64,
) -> Result<DVector<f64>> {
    let phi_tr = rulsif_basis(train_x, centers, sigma);
    let phi_te = rulsif_basis(test_x, centers, sigma);
    let (h_hat, h_vec) = rulsif_moments(&phi_tr, &phi_te, alpha);
    solve_ridge(&h_hat, &h_vec, lambda)
}

fn rulsif_moments(
    phi_tr: &DMatrix<f64>,
    phi_te: &DMatrix<f64>,
    alpha: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let n_tr = phi_tr.nrows() as f64;
    let n_te = phi_te.nrows() as f64;
    let h_hat = phi_te.transpose() * phi_te * (alpha / n_te)
        + phi_tr.transpose() * phi_tr * ((1.0 - alpha) / n_tr);
    let h_vec = phi_te.transpose().column_sum() / n_te;
    (h_hat, h_vec)
}

fn solve_ridge(h_hat: &DMatrix<f64>, h_vec: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let k = h_hat.nrows();
    // the constant basis term (last coordinate) is unpenalized, like a
    // regression intercept, so heavy shrinkage still admits r ≡ 1
    let mut system = h_hat + DMatrix::identity(k, k) * lambda;
    system[(k - 1, k - 1)] -= lambda;
    system
        .cholesky()
        .map(|ch| ch.solve(h_vec))
        .ok_or_else(|| Error::Numerical("RuLSIF system not positive definite".into()))
}

/// RuLSIF squared-loss criterion J(θ) = ½θᵀĤθ − ĥᵀθ (lower is better).
fn rulsif_loss(h_hat: &DMatrix<f64>, h_vec: &DVector<f64>, theta: &DVector<f64>) -> f64 {
    0.5 * (theta.transpose() * h_hat * theta)[(0, 0)] - h_vec.dot(theta)
}

fn fold_split(n: usize, k: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut folds = vec![Vec::new(); k];
    for (i, v) in idx.into_iter().enumerate() {
        folds[i % k].push(v);
    }
    folds
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Mean-one relative density-ratio weights r̂_α(xᵢ) at the training rows.
pub fn rulsif_weights(
    train_x: &DMatrix<f64>,
    test_x: &DMatrix<f64>,
    cfg: &RulsifConfig,
    seed: u64,
) -> Result<Weights> {
    use rand::seq::index::sample;
    cfg.validate()?;
    check_shapes(train_x, test_x)?;
    let n_tr = train_x.nrows();
    let n_te = test_x.nrows();
    let base_sigma = match cfg.sigma {
        Some(s) => s,
        None => {
            let mut combined = DMatrix::zeros(n_tr + n_te, train_x.ncols());
            combined.rows_mut(0, n_tr).copy_from(train_x);
            combined.rows_mut(n_tr, n_te).copy_from(test_x);
            median_heuristic_bandwidth(&combined, seed)?
        }
    };
    let n_centers = cfg.n_centers.min(n_te);
    let mut center_rng = rng::stream(seed, 0x0CE7);
    let center_idx: Vec<usize> = sample(&mut center_rng, n_te, n_centers).into_vec();
    let centers = select_rows(test_x, &center_idx);

    let mut fold_rng = rng::stream(seed, 0x0F0D);
    let k = cfg.cv_folds.min(n_tr).min(n_te).max(2);
    let tr_folds = fold_split(n_tr, k, &mut fold_rng);
    let te_folds = fold_split(n_te, k, &mut fold_rng);

    // grid search (σ outer so each basis is built once), ties to first entry
    let mut best: Option<(f64, f64, f64)> = None; // (loss, sigma, lambda)
    for &scale in &cfg.sigma_scale_grid {
        let sigma = base_sigma * scale;
        let phi_tr = rulsif_basis(train_x, &centers, sigma);
        let phi_te = rulsif_basis(test_x, &centers, sigma);
        for &lambda in &cfg.lambda_grid {
            let mut loss = 0.0;
            for f in 0..k {
                let tr_in: Vec<usize> = (0..n_tr).filter(|i| !tr_folds[f].contains(i)).collect();
                let te_in: Vec<usize> = (0..n_te).filter(|i| !te_folds[f].contains(i)).collect();
                let (h_in, v_in) =
                    rulsif_moments(&select_rows(&phi_tr, &tr_in), &select_rows(&phi_te, &te_in), cfg.alpha);
                let theta = solve_ridge(&h_in, &v_in, lambda)?;
                let (h_out, v_out) = rulsif_moments(
                    &select_rows(&phi_tr, &tr_folds[f]),
                    &select_rows(&phi_te, &te_folds[f]),
                    cfg.alpha,
                );
                loss += rulsif_loss(&h_out, &v_out, &theta);
            }
            loss /= k as f64;
            if best.is_none_or(|(b, _, _)| loss < b) {
                best = Some((loss, sigma, lambda));
            }
        }
    }
    let (_, sigma, lambda) = best.expect("nonempty grids");
    let theta = rulsif_solve(train_x, test_x, &centers, lambda, sigma, cfg.alpha)?;
    let phi_tr = rulsif_basis(train_x, &centers, sigma);
    let raw: Vec<f64> = (0..n_tr)
        .map(|i| (phi_tr.row(i).transpose().dot(&theta)).max(0.0))
        .collect();
    Weights::raw(raw)?.mean_one()
}

// ---------------------------------------------------------------------------
// Classifier-based ratio (odds transform)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    LogisticElasticNet,
    RandomForest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierRatioConfig {
    pub kind: ClassifierKind,
    /// Candidate specs for internal CV; `None` uses a built-in grid for the
    /// chosen kind.
    pub grid: Option<Vec<LearnerSpec>>,
    pub p_max: f64,
    /// Multiply the odds by n_train/n_test (Eq. 3 prior factor).
    pub prior_correction: bool,
    pub cv_folds: usize,
}

impl Default for ClassifierRatioConfig {
    fn default() -> Self {
        ClassifierRatioConfig {
            kind: ClassifierKind::LogisticElasticNet,
            grid: None,
            p_max: 0.99,
            prior_correction: false,
            cv_folds: 5,
        }
    }
}

impl ClassifierRatioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_max > 0.5 && self.p_max < 1.0) {
            return Err(Error::Config("p_max must lie in (0.5, 1)".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("classifier ratio needs >= 2 CV folds".into()));
        }
        if let Some(grid) = &self.grid {
            if grid.is_empty() {
                return Err(Error::Config("classifier ratio grid is empty".into()));
            }
            for spec in grid {
                let ok = matches!(
                    (self.kind, spec),
                    (ClassifierKind::LogisticElasticNet, LearnerSpec::Logistic(_))
                        | (ClassifierKind::RandomForest, LearnerSpec::RandomForest(_))
                );
                if !ok {
                    return Err(Error::Config(format!(
                        "grid entry family {} does not match classifier kind",
                        spec.family_name()
                    )));
                }
            }
        }
        Ok(())
    }

    fn default_grid(&self, n_combined: usize) -> Vec<LearnerSpec> {
        match self.kind {
            ClassifierKind::LogisticElasticNet => [1e-3, 1e-2, 1e-1, 1.0]
                .iter()
                .map(|&l| LearnerSpec::Logistic(LogisticSpec { l1: l, l2: l, ..Default::default() }))
                .collect(),
            ClassifierKind::RandomForest => {
                // wide leaves keep the odds smooth enough to act as a ratio;
                // Brier CV picks the wider candidate when there is no shift
                [(n_combined / 10).max(10), (n_combined / 4).max(20)]
                    .iter()
                    .map(|&leaf| {
                        LearnerSpec::RandomForest(ForestSpec {
                            n_trees: 100,
                            min_samples_leaf: leaf,
                            ..Default::default()
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Odds transform of Eq. (3) after clipping p into [1 − p_max, p_max].
fn clipped_odds(p: f64, p_max: f64) -> f64 {
    let p = p.clamp(1.0 - p_max, p_max);
    p / (1.0 - p)
}

/// Mean-one classifier-based ratio weights for the training rows: a
/// probabilistic classifier separates test (label 1) from train (label 0)
/// and the clipped odds at each training row estimate the density ratio.
pub fn classifier_weights(
    train_x: &DMatrix<f64>,
    test_x: &DMatrix<f64>,
    cfg: &ClassifierRatioConfig,
    seed: u64,
) -> Result<Weights> {
    cfg.validate()?;
    check_shapes(train_x, test_x)?;
    let n_tr = train_x.nrows();
    let n_te = test_x.nrows();
    let mut x = DMatrix::zeros(n_tr + n_te, train_x.ncols());
    x.rows_mut(0, n_tr).copy_from(train_x);
    x.rows_mut(n_tr, n_te).copy_from(test_x);
    let y: Vec<u8> = (0..n_tr + n_te).map(|i| (i >= n_tr) as u8).collect();
    let feature_names = (0..x.ncols()).map(|j| format!("f{j}")).collect();
    let data = Dataset::new(x, y, feature_names)?;

    let grid = match &cfg.grid {
        Some(g) => g.clone(),
        None => cfg.default_grid(n_tr + n_te),
    };
    // select by CV Brier score: a proper scoring rule, so under no shift
    // the near-constant (strongly regularized) candidate wins and the
    // resulting weights stay near one
    let spec = if grid.len() == 1 {
        grid[0].clone()
    } else {
        let mut best: Option<(f64, &LearnerSpec)> = None;
        for cand in &grid {
            let cv = crate::eval::kfold_cv(&data, cand, None, cfg.cv_folds, seed)?;
            if best.is_none_or(|(b, _)| cv.brier_mean < b) {
                best = Some((cv.brier_mean, cand));
            }
        }
        best.expect("nonempty grid").1.clone()
    };
    let model = learners::fit(&spec, data.x(), data.y(), &Weights::uniform(n_tr + n_te), seed)?;
    let probs = model.predict_proba(train_x)?;
    let factor = if cfg.prior_correction {
        n_tr as f64 / n_te as f64
    } else {
        1.0
    };
    let raw: Vec<f64> = probs.iter().map(|&p| factor * clipped_odds(p, cfg.p_max)).collect();
    Weights::raw(raw)?.mean_one()
}
