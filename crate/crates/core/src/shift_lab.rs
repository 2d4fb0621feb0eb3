//! Train/test split constructions exhibiting covariate, prior, or concept
//! shift: a spectral-clustering split on a screened feature pair, synthetic
//! Gaussian-mixture generators with analytic oracle ratios, and the prior- and
//! concept-shift control constructions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_model::column_stats;
use crate::error::{Error, Result};
use crate::learners::{self, ForestSpec, LearnerSpec};
use crate::ratio::{median_heuristic_bandwidth, Weights};
use crate::rng;
use crate::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Spectral,
    Synthetic,
    PriorShift,
    ConceptShift,
    /// Loaded from a user-supplied split file.
    Provided,
}

/// Disjoint train/test row-index sets over a Dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub provenance: Provenance,
}

impl SplitAssignment {
    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if self.train_indices.is_empty() || self.test_indices.is_empty() {
            return Err(Error::Data("split has an empty side".into()));
        }
        let mut seen = vec![false; n_rows];
        for &i in self.train_indices.iter().chain(&self.test_indices) {
            if i >= n_rows {
                return Err(Error::Data(format!("split index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::Data(format!("split index {i} assigned twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Two-column CSV (`row_index,role`), train rows first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row_index,role\n");
        for &i in &self.train_indices {
            out.push_str(&format!("{i},train\n"));
        }
        for &i in &self.test_indices {
            out.push_str(&format!("{i},test\n"));
        }
        out
    }

    /// Parse the two-column CSV produced by `to_csv`.
    pub fn from_csv(text: &str) -> Result<SplitAssignment> {
        let mut lines = text.lines();
        match lines.next() {
            Some("row_index,role") => {}
            _ => return Err(Error::Data("split file must start with 'row_index,role'".into())),
        }
        let mut train_indices = Vec::new();
        let mut test_indices = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (idx, role) = line
                .split_once(',')
                .ok_or_else(|| Error::Data(format!("split line {} lacks a comma", lineno + 2)))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad row index '{idx}' in split file")))?;
            match role.trim() {
                "train" => train_indices.push(idx),
                "test" => test_indices.push(idx),
                other => {
                    return Err(Error::Data(format!("unknown split role '{other}'")));
                }
            }
        }
        Ok(SplitAssignment { train_indices, test_indices, provenance: Provenance::Provided })
    }
}

// ---------------------------------------------------------------------------
// Synthetic generators

/// Mixture of Gaussians over ℝ^d with pointwise-evaluable density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn single(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        GaussianMixture { weights: vec![1.0], means: vec![mean], covs: vec![cov] }
    }

    /// Diagonal-covariance convenience constructor.
    pub fn diagonal(mean: &[f64], std: &[f64]) -> Self {
        let d = mean.len();
        let cov = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                std[i] * std[i]
            } else {
                0.0
            }
        });
        Self::single(DVector::from_row_slice(mean), cov)
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty()
            || self.weights.len() != self.means.len()
            || self.weights.len() != self.covs.len()
        {
            return Err(Error::Config("mixture component counts disagree".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mixture weights must be nonnegative and sum to 1".into()));
        }
        let d = self.dim();
        for (mean, cov) in self.means.iter().zip(&self.covs) {
            if mean.len() != d || cov.nrows() != d || cov.ncols() != d {
                return Err(Error::Config("mixture component dimensions disagree".into()));
            }
            if cov.clone().cholesky().is_none() {
                return Err(Error::Config("mixture covariance not positive definite".into()));
            }
        }
        Ok(())
    }

    /// Draw `n` rows (one per sample) with a caller-provided RNG.
    pub fn sample_n(&self, n: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
        self.validate()?;
        let d = self.dim();
        let factors: Vec<DMatrix<f64>> = self
            .covs
            .iter()
            .map(|c| c.clone().cholesky().expect("validated").l())
            .collect();
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut comp = self.weights.len() - 1;
            for (k, &w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    comp = k;
                    break;
                }
            }
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            let x = &self.means[comp] + &factors[comp] * z;
            out.row_mut(i).copy_from(&x.transpose());
        }
        Ok(out)
    }

    pub fn density(&self, x: &DVector<f64>) -> Result<f64> {
        self.validate()?;
        let d = self.dim() as f64;
        if x.len() != self.dim() {
            return Err(Error::Data("density query has wrong dimension".into()));
        }
        let mut total = 0.0;
        for ((w, mean), cov) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let chol = cov.clone().cholesky().expect("validated");
            let diff = x - mean;
            let solved = chol.solve(&diff);
            let quad = diff.dot(&solved);
            let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
            let log_norm = -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det);
            total += w * (log_norm - 0.5 * quad).exp();
        }
        Ok(total)
    }
}

/// Monotone link on a polynomial index: p(y=1|x) = σ(scale·(βᵀx + γᵀx³) + offset),
/// optionally corrupted by label-flip noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelModel {
    pub linear: Vec<f64>,
    pub cubic: Vec<f64>,
    pub scale: f64,
    pub offset: f64,
    /// Probability of flipping the drawn label.
    pub flip_noise: f64,
}

impl LabelModel {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.linear.len() != d || self.cubic.len() != d {
            return Err(Error::Config("label model dimension mismatch".into()));
        }
        if !(0.0..=0.5).contains(&self.flip_noise) {
            return Err(Error::Config("flip noise must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    /// Conditional positive probability p(y = 1 | x); identical for train and
    /// test by construction (the covariate-shift condition).
    pub fn positive_prob(&self, x: &DVector<f64>) -> f64 {
        let mut idx = self.offset;
        for j in 0..x.len() {
            idx += self.scale * (self.linear[j] * x[j] + self.cubic[j] * x[j].powi(3));
        }
        let p = 1.0 / (1.0 + (-idx).exp());
        p * (1.0 - self.flip_noise) + (1.0 - p) * self.flip_noise
    }
}

/// Fully specified synthetic covariate-shift scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShiftSpec {
    pub train: GaussianMixture,
    pub test: GaussianMixture,
    pub label: LabelModel,
    pub seed: u64,
}

impl SyntheticShiftSpec {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.test.validate()?;
        if self.train.dim() != self.test.dim() {
            return Err(Error::Config("train/test mixture dimensions disagree".into()));
        }
        self.label.validate(self.train.dim())
    }

    /// Default 2-D benchmark where importance weighting measurably helps a
    /// misspecified linear model: the optimal linear direction in x₁ flips
    /// sign between the train region (x₁ ≈ 0.8) and the test region
    /// (x₁ ≈ −0.2) under the cubic labeling x₁³ − x₁ − x₂.
    pub fn default_benchmark(seed: u64) -> Self {
        SyntheticShiftSpec {
            train: GaussianMixture::diagonal(&[0.8, 0.0], &[0.6, 1.0]),
            test: GaussianMixture::diagonal(&[-0.2, 0.0], &[0.3, 1.0]),
            label: LabelModel {
                linear: vec![-1.0, -1.0],
                cubic: vec![1.0, 0.0],
                scale: 2.0,
                offset: 0.0,
                flip_noise: 0.0,
            },
            seed,
        }
    }

    /// 1-D N(0,1) → N(1,1) shift with a closed-form ratio exp(x − ½);
    /// the standard fixture for ratio-fidelity checks.
    pub fn gaussian_1d_shift(seed: u64) -> Self {
        SyntheticShiftSpec {
            train: GaussianMixture::diagonal(&[0.0], &[1.0]),
            test: GaussianMixture::diagonal(&[1.0], &[1.0]),
            label: LabelModel {
                linear: vec![1.0],
                cubic: vec![0.0],
                scale: 1.0,
                offset: 0.0,
                flip_noise: 0.0,
            },
            seed,
        }
    }
}

/// Sample train and test datasets; covariates differ by spec, labels come
/// from the shared conditional p(y|x).
pub fn make_synthetic_shift(
    spec: &SyntheticShiftSpec,
    n_train: usize,
    n_test: usize,
) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("synthetic sample sizes must be positive".into()));
    }
    let d = spec.train.dim();
    let feature_names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let make = |mixture: &GaussianMixture, n: usize, x_tag: u64, y_tag: u64| -> Result<Dataset> {
        let mut x_rng = rng::stream(spec.seed, x_tag);
        let x = mixture.sample_n(n, &mut x_rng)?;
        let mut y_rng = rng::stream(spec.seed, y_tag);
        let y: Vec<u8> = (0..n)
            .map(|i| {
                let xi = x.row(i).transpose();
                y_rng.random_bool(spec.label.positive_prob(&xi)) as u8
            })
            .collect();
        Dataset::new(x, y, feature_names.clone())
    };
    let train = make(&spec.train, n_train, 1, 3)?;
    let test = make(&spec.test, n_test, 2, 4)?;
    Ok((train, test))
}

/// Oracle density ratio p_test(x) / p_train(x) of Eq. (1).
pub fn true_density_ratio(x: &DVector<f64>, spec: &SyntheticShiftSpec) -> Result<f64> {
    let p_tr = spec.train.density(x)?;
    let p_te = spec.test.density(x)?;
    if p_tr <= 0.0 {
        return Err(Error::Numerical("train density vanishes at query point".into()));
    }
    Ok(p_te / p_tr)
}

/// Oracle relative ratio p_test / (α·p_test + (1−α)·p_train).
pub fn true_relative_ratio(x: &DVector<f64>, spec: &SyntheticShiftSpec, alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config("alpha must lie in [0, 1)".into()));
    }
    let p_tr = spec.train.density(x)?;
    let p_te = spec.test.density(x)?;
    let denom = alpha * p_te + (1.0 - alpha) * p_tr;
    if denom <= 0.0 {
        return Err(Error::Numerical("relative-ratio denominator vanishes".into()));
    }
    Ok(p_te / denom)
}

// ---------------------------------------------------------------------------
// Spectral split

const MIN_CLUSTER: usize = 10;

fn kmeans_assign(points: &DMatrix<f64>, centroids: &DMatrix<f64>) -> Vec<usize> {
    (0..points.nrows())
        .map(|i| {
            let mut best = (f64::INFINITY, 0);
            for c in 0..centroids.nrows() {
                let mut d2 = 0.0;
                for j in 0..points.ncols() {
                    let d = points[(i, j)] - centroids[(c, j)];
                    d2 += d * d;
                }
                if d2 < best.0 {
                    best = (d2, c);
                }
            }
            best.1
        })
        .collect()
}

/// Lloyd's algorithm with deterministic farthest-point initialization, which
/// is equivariant under row permutation (the split invariant depends on it).
fn kmeans(points: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let n = points.nrows();
    let dim = points.ncols();
    let grand_mean = points.row_mean();
    let mut centroids = DMatrix::zeros(k, dim);
    // first centroid: farthest point from the grand mean (ties: lexicographic)
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let dist2 = |i: usize, row: &DMatrix<f64>, r: usize| -> f64 {
        (0..dim).map(|j| (points[(i, j)] - row[(r, j)]).powi(2)).sum()
    };
    let lex_less = |a: usize, b: usize| -> bool {
        for j in 0..dim {
            if points[(a, j)] != points[(b, j)] {
                return points[(a, j)] < points[(b, j)];
            }
        }
        false
    };
    let gm = DMatrix::from_fn(1, dim, |_, j| grand_mean[j]);
    let mut first = 0;
    for i in 1..n {
        let (di, df) = (dist2(i, &gm, 0), dist2(first, &gm, 0));
        if di > df || (di == df && lex_less(i, first)) {
            first = i;
        }
    }
    chosen.push(first);
    while chosen.len() < k {
        // farthest point from the already-chosen set
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for i in 0..n {
            let d = chosen
                .iter()
                .map(|&c| {
                    let cm = DMatrix::from_fn(1, dim, |_, j| points[(c, j)]);
                    dist2(i, &cm, 0)
                })
                .fold(f64::INFINITY, f64::min);
            if d > best_d || (d == best_d && best != usize::MAX && lex_less(i, best)) {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
    }
    for (c, &i) in chosen.iter().enumerate() {
        for j in 0..dim {
            centroids[(c, j)] = points[(i, j)];
        }
    }
    let mut assignment = kmeans_assign(points, &centroids);
    for _ in 0..100 {
        let mut sums: DMatrix<f64> = DMatrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for j in 0..dim {
                sums[(a, j)] += points[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
        let next = kmeans_assign(points, &centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    assignment
}

/// Spectral-clustering split on two z-scored features: RBF affinity
/// (median-heuristic bandwidth unless given), symmetric-normalized embedding
/// from the top-k eigenvectors, row normalization, then k-means. The largest
/// cluster becomes the training side.
pub fn spectral_split(
    data: &Dataset,
    feature_pair: (&str, &str),
    k: usize,
    bandwidth: Option<f64>,
    seed: u64,
) -> Result<SplitAssignment> {
    if k < 2 {
        return Err(Error::Config("spectral split needs k >= 2".into()));
    }
    let n = data.n_rows();
    if n < 2 * k {
        return Err(Error::Data("too few rows for a spectral split".into()));
    }
    let a = data
        .feature_index(feature_pair.0)
        .ok_or_else(|| Error::Config(format!("unknown feature '{}'", feature_pair.0)))?;
    let b = data
        .feature_index(feature_pair.1)
        .ok_or_else(|| Error::Config(format!("unknown feature '{}'", feature_pair.1)))?;
    let mut pts = DMatrix::zeros(n, 2);
    for i in 0..n {
        pts[(i, 0)] = data.x()[(i, a)];
        pts[(i, 1)] = data.x()[(i, b)];
    }
    let (means, stds) = column_stats(&pts);
    if stds.iter().any(|&s| s <= 0.0) {
        return Err(Error::Numerical("degenerate split: feature has zero variance".into()));
    }
    for i in 0..n {
        for j in 0..2 {
            pts[(i, j)] = (pts[(i, j)] - means[j]) / stds[j];
        }
    }
    let sigma = match bandwidth {
        Some(s) if s > 0.0 => s,
        Some(_) => return Err(Error::Config("affinity bandwidth must be positive".into())),
        None => median_heuristic_bandwidth(&pts, seed)
            .map_err(|_| Error::Numerical("degenerate split: all points identical".into()))?,
    };
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut affinity = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            let d0 = pts[(i, 0)] - pts[(j, 0)];
            let d1 = pts[(i, 1)] - pts[(j, 1)];
            (-(d0 * d0 + d1 * d1) * inv).exp()
        }
    });
    let degrees: Vec<f64> = (0..n).map(|i| affinity.row(i).sum()).collect();
    if degrees.iter().any(|&d| d <= 0.0) {
        return Err(Error::Numerical("isolated node in affinity graph".into()));
    }
    for i in 0..n {
        for j in 0..n {
            affinity[(i, j)] /= (degrees[i] * degrees[j]).sqrt();
        }
    }
    let eigen = affinity.symmetric_eigen();
    // top-k eigenvectors of D^{-1/2} A D^{-1/2} == bottom-k of the Laplacian
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eigen.eigenvalues[j].partial_cmp(&eigen.eigenvalues[i]).unwrap());
    let mut embed = DMatrix::zeros(n, k);
    for (col, &e) in order.iter().take(k).enumerate() {
        for i in 0..n {
            embed[(i, col)] = eigen.eigenvectors[(i, e)];
        }
    }
    for i in 0..n {
        let norm = embed.row(i).norm();
        if norm > 0.0 {
            for j in 0..k {
                embed[(i, j)] /= norm;
            }
        }
    }
    let assignment = kmeans(&embed, k);
    let mut counts = vec![0usize; k];
    for &a in &assignment {
        counts[a] += 1;
    }
    if counts.iter().any(|&c| c < MIN_CLUSTER) {
        return Err(Error::Numerical(format!(
            "degenerate split: smallest cluster has {} members (< {MIN_CLUSTER})",
            counts.iter().min().unwrap()
        )));
    }
    // largest cluster = train; ties broken by lower centroid norm in the
    // embedding
    let centroid_norm = |c: usize| -> f64 {
        let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
        let mut s = vec![0.0; k];
        for &i in &members {
            for j in 0..k {
                s[j] += embed[(i, j)];
            }
        }
        s.iter().map(|v| (v / members.len() as f64).powi(2)).sum::<f64>().sqrt()
    };
    let mut train_cluster = 0;
    for c in 1..k {
        if counts[c] > counts[train_cluster]
            || (counts[c] == counts[train_cluster] && centroid_norm(c) < centroid_norm(train_cluster))
        {
            train_cluster = c;
        }
    }
    let split = SplitAssignment {
        train_indices: (0..n).filter(|&i| assignment[i] == train_cluster).collect(),
        test_indices: (0..n).filter(|&i| assignment[i] != train_cluster).collect(),
        provenance: Provenance::Spectral,
    };
    split.validate(n)?;
    Ok(split)
}

/// Per-feature random-forest importance averaged over stratified CV folds,
/// normalized to sum one. Used to pick the shift feature pair.
pub fn rf_feature_importance_screen(
    data: &Dataset,
    cv_folds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let folds = crate::eval::stratified_folds(data.y(), cv_folds, seed)?;
    let d = data.n_features();
    let mut total = vec![0.0; d];
    for (f, _) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let train = data.select(&train_idx)?;
        let spec = LearnerSpec::RandomForest(ForestSpec::default());
        let model = learners::fit(
            &spec,
            train.x(),
            train.y(),
            &Weights::uniform(train_idx.len()),
            rng::child_seed(seed, f as u64),
        )?;
        let imp = learners::forest_importance(&model)?;
        for j in 0..d {
            total[j] += imp[j];
        }
    }
    let sum: f64 = total.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Numerical("no informative splits across folds".into()));
    }
    Ok(total.iter().map(|v| v / sum).collect())
}

// ---------------------------------------------------------------------------
// Prior and concept shift

/// Rebalance a held-out test subset to `target_positive_rate` (test size at
/// most n/3, shrunk to the largest feasible size); train is the remainder.
/// Within-class covariate distributions are untouched.
pub fn make_prior_shift(
    data: &Dataset,
    target_positive_rate: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    use rand::seq::SliceRandom;
    if !(0.0 < target_positive_rate && target_positive_rate < 1.0) {
        return Err(Error::Config("target positive rate must lie in (0, 1)".into()));
    }
    let n = data.n_rows();
    let mut pos: Vec<usize> = (0..n).filter(|&i| data.y()[i] == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| data.y()[i] == 0).collect();
    // largest feasible test size <= n/3 hitting the target rate
    let cap = n / 3;
    let feasible_pos = (pos.len() as f64 / target_positive_rate).floor() as usize;
    let feasible_neg = (neg.len() as f64 / (1.0 - target_positive_rate)).floor() as usize;
    let n_test = cap.min(feasible_pos).min(feasible_neg);
    let n_pos_test = (target_positive_rate * n_test as f64).round() as usize;
    let n_neg_test = n_test - n_pos_test;
    if n_pos_test == 0 || n_neg_test == 0 || n_pos_test > pos.len() || n_neg_test > neg.len() {
        return Err(Error::Data(format!(
            "target rate {target_positive_rate} infeasible with {} positives / {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = rng::stream(seed, 0x9410);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut test_indices: Vec<usize> = pos[..n_pos_test]
        .iter()
        .chain(&neg[..n_neg_test])
        .copied()
        .collect();
    let mut train_indices: Vec<usize> = pos[n_pos_test..]
        .iter()
        .chain(&neg[n_neg_test..])
        .copied()
        .collect();
    test_indices.sort_unstable();
    train_indices.sort_unstable();
    let split = SplitAssignment {
        train_indices,
        test_indices,
        provenance: Provenance::PriorShift,
    };
    split.validate(n)?;
    Ok(split)
}

/// Regenerate labels i.i.d. Bernoulli at the original positive rate,
/// independent of the covariates; X is preserved exactly.
pub fn make_concept_shift(data: &Dataset, seed: u64) -> Result<Dataset> {
    let rate = data.positive_rate();
    let mut rng = rng::stream(seed, 0xC09C);
    let y: Vec<u8> = (0..data.n_rows()).map(|_| rng.random_bool(rate) as u8).collect();
    data.with_labels(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_sample_ks(a: &[f64], b: &[f64]) -> f64 {
        let mut sa = a.to_vec();
        let mut sb = b.to_vec();
        sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut d: f64 = 0.0;
        let (mut i, mut j) = (0, 0);
        while i < sa.len() && j < sb.len() {
            if sa[i] <= sb[j] {
                i += 1;
            } else {
                j += 1;
            }
            let fa = i as f64 / sa.len() as f64;
            let fb = j as f64 / sb.len() as f64;
            d = d.max((fa - fb).abs());
        }
        d
    }

    #[test]
    fn split_validation_catches_overlap_and_bounds() {
        let good = SplitAssignment {
            train_indices: vec![0, 1],
            test_indices: vec![2, 3],
            provenance: Provenance::Synthetic,
        };
        assert!(good.validate(4).is_ok());
        let overlap = SplitAssignment {
            train_indices: vec![0, 1],
            test_indices: vec![1, 2],
            provenance: Provenance::Synthetic,
        };
        assert!(overlap.validate(3).is_err());
        let oob = SplitAssignment {
            train_indices: vec![0],
            test_indices: vec![9],
            provenance: Provenance::Synthetic,
        };
        assert!(oob.validate(4).is_err());
    }

    #[test]
    fn split_csv_roundtrip_shape() {
        let s = SplitAssignment {
            train_indices: vec![2, 0],
            test_indices: vec![1],
            provenance: Provenance::Spectral,
        };
        let csv = s.to_csv();
        assert_eq!(csv, "row_index,role\n2,train\n0,train\n1,test\n");
    }

    #[test]
    fn mixture_rejects_bad_parameters() {
        let bad_weights = GaussianMixture {
            weights: vec![0.6, 0.6],
            means: vec![DVector::zeros(1), DVector::zeros(1)],
            covs: vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        };
        assert!(bad_weights.validate().is_err());
        let not_pd = GaussianMixture::single(DVector::zeros(2), DMatrix::from_element(2, 2, 1.0));
        assert!(not_pd.validate().is_err());
    }

    #[test]
    fn standard_normal_density_closed_form() {
        let g = GaussianMixture::diagonal(&[0.0], &[1.0]);
        let at0 = g.density(&DVector::from_vec(vec![0.0])).unwrap();
        assert!((at0 - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() <= 1e-12);
        let at1 = g.density(&DVector::from_vec(vec![1.0])).unwrap();
        assert!((at1 - at0 * (-0.5f64).exp()).abs() <= 1e-12);
    }

    #[test]
    fn correlated_gaussian_density_matches_hand_formula() {
        // 2-D zero-mean, cov [[2, 0.5], [0.5, 1]]
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = GaussianMixture::single(DVector::zeros(2), cov);
        let x = DVector::from_vec(vec![0.7, -0.4]);
        let det: f64 = 2.0 * 1.0 - 0.25;
        let inv = [[1.0 / det, -0.5 / det], [-0.5 / det, 2.0 / det]];
        let quad = inv[0][0] * 0.7 * 0.7
            + 2.0 * inv[0][1] * 0.7 * (-0.4)
            + inv[1][1] * 0.4 * 0.4;
        let expected = (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
        assert!((g.density(&x).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn mixture_density_is_weighted_sum() {
        let a = GaussianMixture::diagonal(&[0.0], &[1.0]);
        let b = GaussianMixture::diagonal(&[2.0], &[0.5]);
        let mix = GaussianMixture {
            weights: vec![0.3, 0.7],
            means: vec![a.means[0].clone(), b.means[0].clone()],
            covs: vec![a.covs[0].clone(), b.covs[0].clone()],
        };
        let x = DVector::from_vec(vec![0.9]);
        let expected = 0.3 * a.density(&x).unwrap() + 0.7 * b.density(&x).unwrap();
        assert!((mix.density(&x).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn sampling_mean_matches_target() {
        let spec = SyntheticShiftSpec {
            train: GaussianMixture::diagonal(&[0.0], &[1.0]),
            test: GaussianMixture::diagonal(&[1.0], &[0.5]),
            ..SyntheticShiftSpec::gaussian_1d_shift(3)
        };
        let (_, test) = make_synthetic_shift(&spec, 10, 2000).unwrap();
        let mean = test.x().column(0).mean();
        assert!((mean - 1.0).abs() <= 3.0 * 0.5 / (2000.0f64).sqrt());
    }

    #[test]
    fn no_shift_passes_ks_test() {
        let spec = SyntheticShiftSpec {
            test: GaussianMixture::diagonal(&[0.8, 0.0], &[0.6, 1.0]),
            ..SyntheticShiftSpec::default_benchmark(4)
        };
        let (train, test) = make_synthetic_shift(&spec, 1000, 1000).unwrap();
        // alpha = 0.01 critical value for the two-sample KS statistic
        let crit = 1.628 * (2.0 / 1000.0f64).sqrt();
        for j in 0..2 {
            let a: Vec<f64> = train.x().column(j).iter().copied().collect();
            let b: Vec<f64> = test.x().column(j).iter().copied().collect();
            assert!(two_sample_ks(&a, &b) < crit, "feature {j} shifted");
        }
    }

    #[test]
    fn conditional_label_law_shared() {
        let spec = SyntheticShiftSpec::default_benchmark(5);
        // the conditional is the same deterministic function for both sides
        let x = DVector::from_vec(vec![0.3, -1.2]);
        let p = spec.label.positive_prob(&x);
        assert!((p - spec.label.positive_prob(&x)).abs() == 0.0);
        // and matches a direct sigmoid evaluation
        let idx = 2.0 * (0.3f64.powi(3) - 0.3 - (-1.2));
        assert!((p - 1.0 / (1.0 + (-idx).exp())).abs() <= 1e-12);
    }

    #[test]
    fn binned_conditional_rates_agree_across_sides() {
        let spec = SyntheticShiftSpec {
            // same covariate law on both sides isolates the label process
            test: GaussianMixture::diagonal(&[0.8, 0.0], &[0.6, 1.0]),
            ..SyntheticShiftSpec::default_benchmark(6)
        };
        let (train, test) = make_synthetic_shift(&spec, 4000, 4000).unwrap();
        for lo in [-0.2, 0.4, 1.0] {
            let hi = lo + 0.6;
            let rate = |d: &Dataset| {
                let mut n = 0.0;
                let mut p = 0.0;
                for i in 0..d.n_rows() {
                    let v = d.x()[(i, 0)];
                    if v >= lo && v < hi {
                        n += 1.0;
                        p += d.y()[i] as f64;
                    }
                }
                (p / n, n)
            };
            let (r1, n1) = rate(&train);
            let (r2, n2) = rate(&test);
            let se = (r1 * (1.0 - r1) / n1 + r2 * (1.0 - r2) / n2).sqrt();
            assert!((r1 - r2).abs() <= 4.0 * se.max(0.01), "bin {lo}: {r1} vs {r2}");
        }
    }

    #[test]
    fn ratio_identical_distributions_is_one() {
        let spec = SyntheticShiftSpec {
            test: GaussianMixture::diagonal(&[0.0], &[1.0]),
            ..SyntheticShiftSpec::gaussian_1d_shift(0)
        };
        for x in [-2.0, 0.0, 1.5] {
            let v = DVector::from_vec(vec![x]);
            assert!((true_density_ratio(&v, &spec).unwrap() - 1.0).abs() <= 1e-12);
            for alpha in [0.0, 0.1, 0.7] {
                assert!((true_relative_ratio(&v, &spec, alpha).unwrap() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_ratio_closed_form() {
        let spec = SyntheticShiftSpec::gaussian_1d_shift(0);
        for x in [-1.0, 0.0, 0.5, 2.0] {
            let v = DVector::from_vec(vec![x]);
            let got = true_density_ratio(&v, &spec).unwrap();
            assert!((got - (x - 0.5).exp()).abs() <= 1e-10, "at {x}: {got}");
            // cross-check via the numerical density quotient
            let quotient = spec.test.density(&v).unwrap() / spec.train.density(&v).unwrap();
            assert!((got - quotient).abs() <= 1e-12);
        }
    }

    #[test]
    fn change_of_measure_identity_monte_carlo() {
        // E_train[g(x) r(x)] == E_test[g(x)] for bounded g (Eq. 2 content)
        let spec = SyntheticShiftSpec::gaussian_1d_shift(7);
        let (train, test) = make_synthetic_shift(&spec, 10_000, 10_000).unwrap();
        let g = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut weighted: Vec<f64> = Vec::with_capacity(10_000);
        for i in 0..train.n_rows() {
            let v = DVector::from_vec(vec![train.x()[(i, 0)]]);
            weighted.push(g(train.x()[(i, 0)]) * true_density_ratio(&v, &spec).unwrap());
        }
        let direct: Vec<f64> = (0..test.n_rows()).map(|i| g(test.x()[(i, 0)])).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        let (m1, m2) = (mean(&weighted), mean(&direct));
        let se = (var(&weighted, m1) / 10_000.0 + var(&direct, m2) / 10_000.0).sqrt();
        assert!((m1 - m2).abs() <= 3.0 * se, "{m1} vs {m2} (se {se})");
    }

    fn blob_dataset(n_per: usize, seed: u64) -> (Dataset, Vec<usize>) {
        let mut rng = rng::stream(seed, 0);
        let mut x = DMatrix::zeros(2 * n_per, 2);
        let mut truth = Vec::with_capacity(2 * n_per);
        for i in 0..2 * n_per {
            let blob = (i % 2) as f64;
            x[(i, 0)] = blob * 6.0 + rng.random_range(-1.0..1.0);
            x[(i, 1)] = blob * 6.0 + rng.random_range(-1.0..1.0);
            truth.push(i % 2);
        }
        let y: Vec<u8> = (0..2 * n_per).map(|i| (i % 3 == 0) as u8).collect();
        let data = Dataset::new(x, y, vec!["a".into(), "b".into()]).unwrap();
        (data, truth)
    }

    #[test]
    fn spectral_split_recovers_blobs() {
        let (data, truth) = blob_dataset(200, 8);
        let split = spectral_split(&data, ("a", "b"), 2, None, 0).unwrap();
        split.validate(400).unwrap();
        let mut role = vec![0; 400];
        for &i in &split.test_indices {
            role[i] = 1;
        }
        let agree = (0..400).filter(|&i| role[i] == truth[i]).count();
        let agreement = agree.max(400 - agree) as f64 / 400.0;
        assert!(agreement >= 0.95, "agreement {agreement}");
    }

    #[test]
    fn spectral_split_identical_points_degenerate() {
        let x = DMatrix::from_element(50, 2, 1.0);
        let y: Vec<u8> = (0..50).map(|i| (i % 2) as u8).collect();
        let data = Dataset::new(x, y, vec!["a".into(), "b".into()]).unwrap();
        let err = spectral_split(&data, ("a", "b"), 2, None, 0);
        assert!(err.is_err());
    }

    #[test]
    fn spectral_split_deterministic_and_permutation_equivariant() {
        let (data, _) = blob_dataset(100, 9);
        let s1 = spectral_split(&data, ("a", "b"), 2, None, 3).unwrap();
        let s2 = spectral_split(&data, ("a", "b"), 2, None, 3).unwrap();
        assert_eq!(s1, s2);
        // reverse the rows; the assignment must follow the permutation
        let perm: Vec<usize> = (0..200).rev().collect();
        let permuted = data.select(&perm).unwrap();
        let s3 = spectral_split(&permuted, ("a", "b"), 2, None, 3).unwrap();
        let mut mapped: Vec<usize> = s3.train_indices.iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        let mut orig = s1.train_indices.clone();
        orig.sort_unstable();
        assert_eq!(mapped, orig);
    }

    #[test]
    fn spectral_split_beats_random_split_on_ks() {
        let (data, _) = blob_dataset(250, 10);
        let split = spectral_split(&data, ("a", "b"), 2, None, 0).unwrap();
        let col: Vec<f64> = data.x().column(0).iter().copied().collect();
        let take = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| col[i]).collect() };
        let observed = two_sample_ks(&take(&split.train_indices), &take(&split.test_indices));
        // permutation null: random splits of identical sizes
        use rand::seq::SliceRandom;
        let mut rng = rng::stream(11, 0);
        let n_train = split.train_indices.len();
        let mut exceed = 0;
        for _ in 0..200 {
            let mut idx: Vec<usize> = (0..500).collect();
            idx.shuffle(&mut rng);
            let ks = two_sample_ks(&take(&idx[..n_train]), &take(&idx[n_train..]));
            if ks >= observed {
                exceed += 1;
            }
        }
        assert!(exceed == 0, "null exceeded observed {exceed}/200 times");
    }

    #[test]
    fn importance_screen_single_feature_and_signal() {
        let mut rng = rng::stream(12, 0);
        let x = DMatrix::from_fn(200, 1, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<u8> = (0..200).map(|i| (x[(i, 0)] > 0.0) as u8).collect();
        let data = Dataset::new(x, y, vec!["only".into()]).unwrap();
        let imp = rf_feature_importance_screen(&data, 5, 0).unwrap();
        assert_eq!(imp, vec![1.0]);
    }

    #[test]
    fn importance_screen_ranks_signal_over_noise() {
        let mut rng = rng::stream(13, 0);
        let x = DMatrix::from_fn(800, 2, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<u8> = (0..800)
            .map(|i| (x[(i, 0)] + 0.1 * rng.random_range(-1.0..1.0) > 0.0) as u8)
            .collect();
        let data = Dataset::new(x, y, vec!["signal".into(), "noise".into()]).unwrap();
        let imp = rf_feature_importance_screen(&data, 5, 0).unwrap();
        assert!((imp.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(imp[0] > imp[1], "importances {imp:?}");
    }

    fn labeled_dataset(n: usize, rate: f64, seed: u64) -> Dataset {
        let mut rng = rng::stream(seed, 0);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<u8> = (0..n).map(|_| rng.random_bool(rate) as u8).collect();
        Dataset::new(x, y, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn prior_shift_hits_table_rates() {
        let data = labeled_dataset(3000, 0.469, 14);
        for target in [0.459, 0.556] {
            let split = make_prior_shift(&data, target, 0).unwrap();
            split.validate(3000).unwrap();
            let n_te = split.test_indices.len() as f64;
            let pos = split.test_indices.iter().filter(|&&i| data.y()[i] == 1).count() as f64;
            assert!((pos / n_te - target).abs() <= 1.0 / n_te + 1e-12, "target {target}");
        }
    }

    #[test]
    fn prior_shift_preserves_within_class_means() {
        let data = labeled_dataset(3000, 0.4, 15);
        let split = make_prior_shift(&data, 0.55, 0).unwrap();
        for class in [0u8, 1u8] {
            let full: Vec<f64> = (0..3000)
                .filter(|&i| data.y()[i] == class)
                .map(|i| data.x()[(i, 0)])
                .collect();
            let test: Vec<f64> = split
                .test_indices
                .iter()
                .filter(|&&i| data.y()[i] == class)
                .map(|&i| data.x()[(i, 0)])
                .collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            // uniform within-class subsampling: means agree up to noise
            let se = (1.0 / 3.0f64) / (test.len() as f64).sqrt(); // std of U(-1,1) is 1/sqrt(3)
            assert!((mean(&full) - mean(&test)).abs() <= 4.0 * (3.0 * se));
        }
    }

    #[test]
    fn prior_shift_infeasible_rate_errors() {
        let data = labeled_dataset(60, 0.05, 16);
        assert!(make_prior_shift(&data, 0.99, 0).is_err());
    }

    #[test]
    fn concept_shift_preserves_covariates_and_rate() {
        let data = labeled_dataset(2000, 0.35, 17);
        let shifted = make_concept_shift(&data, 0).unwrap();
        assert_eq!(data.x(), shifted.x());
        let rate = data.positive_rate();
        let new_rate = shifted.positive_rate();
        let sigma = (rate * (1.0 - rate) / 2000.0).sqrt();
        assert!((new_rate - rate).abs() <= 3.0 * sigma);
        // labels independent of features: point-biserial correlation small
        for j in 0..2 {
            let col: Vec<f64> = shifted.x().column(j).iter().copied().collect();
            let y: Vec<f64> = shifted.y().iter().map(|&v| v as f64).collect();
            let mx = col.iter().sum::<f64>() / 2000.0;
            let my = y.iter().sum::<f64>() / 2000.0;
            let mut cov = 0.0;
            let mut vx = 0.0;
            let mut vy = 0.0;
            for i in 0..2000 {
                cov += (col[i] - mx) * (y[i] - my);
                vx += (col[i] - mx).powi(2);
                vy += (y[i] - my).powi(2);
            }
            let r = cov / (vx.sqrt() * vy.sqrt());
            assert!(r.abs() <= 3.0 / (2000.0f64).sqrt(), "feature {j}: r = {r}");
        }
    }

    #[test]
    fn synthetic_spec_roundtrips_through_serde() {
        let spec = SyntheticShiftSpec::default_benchmark(42);
        let json = serde_json::to_string(&spec).unwrap();
        let back: SyntheticShiftSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }
}
