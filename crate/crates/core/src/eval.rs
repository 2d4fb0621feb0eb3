//! Discrimination and calibration metrics, stratified cross-validation,
//! hyperparameter search by AUROC, percentile-bootstrap intervals, and the
//! importance-weighted risk estimator.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{self, LearnerSpec, ModelArtifact};
use crate::ratio::Weights;
use crate::rng;
use crate::Dataset;

/// AUROC: probability a random positive outranks a random negative, ties
/// credited one half (Mann-Whitney convention). Rank-sum, O(n log n).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data("score/label length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUROC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks over ties
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0; // 1-based
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Brier score: mean squared error of predicted probabilities.
pub fn brier(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Data("probability/label length mismatch".into()));
    }
    if probs.is_empty() {
        return Err(Error::Data("empty input".into()));
    }
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Data("probabilities must lie in [0, 1]".into()));
    }
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - y as f64).powi(2))
        .sum::<f64>()
        / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Squared,
    Logloss,
}

/// Importance-weighted empirical risk: (1/n) sum_i w_i * loss(y_i, f(x_i)).
/// With density-ratio weights this estimates the test-set risk from
/// training data alone.
pub fn weighted_risk(
    model: &ModelArtifact,
    x: &DMatrix<f64>,
    y: &[u8],
    weights: &Weights,
    loss: Loss,
) -> Result<f64> {
    let probs = model.predict_proba(x)?;
    let w = weights.values();
    if w.len() != y.len() {
        return Err(Error::Data("weight/label length mismatch".into()));
    }
    let mut total = 0.0;
    for i in 0..y.len() {
        let p = probs[i];
        let yi = y[i] as f64;
        let l = match loss {
            Loss::Squared => (yi - p).powi(2),
            Loss::Logloss => {
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
            }
        };
        total += w[i] * l;
    }
    Ok(total / y.len() as f64)
}

/// Stratified fold assignment: per class, a seeded shuffle dealt round-robin.
/// Every fold's positive count is within one of n_pos/k.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    if k < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.len() < k || neg.len() < k {
        return Err(Error::Data(format!(
            "{k}-fold stratification impossible with {} positives / {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = rng::stream(seed, 0xF01D);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, idx) in pos.into_iter().chain(neg).enumerate() {
        folds[i % k].push(idx);
    }
    Ok(folds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvMetrics {
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub brier_mean: f64,
    pub brier_std: f64,
    pub k: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// k-fold cross-validation with optional importance weights. Per fold the
/// training weights are subset and renormalized to mean one.
pub fn kfold_cv(
    data: &Dataset,
    spec: &LearnerSpec,
    weights: Option<&Weights>,
    k: usize,
    seed: u64,
) -> Result<CvMetrics> {
    if let Some(w) = weights {
        if w.len() != data.n_rows() {
            return Err(Error::Data("weight count does not match dataset".into()));
        }
    }
    let folds = stratified_folds(data.y(), k, seed)?;
    let mut aurocs = Vec::with_capacity(k);
    let mut briers = Vec::with_capacity(k);
    for (f, fold) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let train = data.select(&train_idx)?;
        let test = data.select(fold)?;
        let w = match weights {
            Some(w) => Weights::raw(train_idx.iter().map(|&i| w.values()[i]).collect())?
                .mean_one()?,
            None => Weights::uniform(train_idx.len()),
        };
        let model = learners::fit(spec, train.x(), train.y(), &w, rng::child_seed(seed, f as u64))?;
        let probs = model.predict_proba(test.x())?;
        aurocs.push(auroc(probs.as_slice(), test.y())?);
        briers.push(brier(probs.as_slice(), test.y())?);
    }
    let (auroc_mean, auroc_std) = mean_std(&aurocs);
    let (brier_mean, brier_std) = mean_std(&briers);
    Ok(CvMetrics { auroc_mean, auroc_std, brier_mean, brier_std, k })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_index: usize,
    pub best_spec: LearnerSpec,
    /// Mean CV AUROC per candidate, in declared order.
    pub candidate_aurocs: Vec<f64>,
    pub k: usize,
    pub seed: u64,
}

/// Exhaustive grid evaluation; selection by mean CV AUROC, ties broken by
/// declared candidate order.
pub fn grid_search(
    data: &Dataset,
    candidates: &[LearnerSpec],
    weights: Option<&Weights>,
    k: usize,
    seed: u64,
) -> Result<GridSearchResult> {
    if candidates.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let mut candidate_aurocs = Vec::with_capacity(candidates.len());
    for spec in candidates {
        let cv = kfold_cv(data, spec, weights, k, seed)?;
        candidate_aurocs.push(cv.auroc_mean);
    }
    let mut best_index = 0;
    for (i, &a) in candidate_aurocs.iter().enumerate() {
        if a > candidate_aurocs[best_index] {
            best_index = i;
        }
    }
    Ok(GridSearchResult {
        best_index,
        best_spec: candidates[best_index].clone(),
        candidate_aurocs,
        k,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    Brier,
}

fn metric_value(metric: Metric, scores: &[f64], labels: &[u8]) -> Result<f64> {
    match metric {
        Metric::Auroc => auroc(scores, labels),
        Metric::Brier => brier(scores, labels),
    }
}

/// Percentile bootstrap interval over seeded resamples of (score, label)
/// pairs. Resamples lacking a class are redrawn, up to 10x the requested
/// count in total.
pub fn bootstrap_interval(
    scores: &[f64],
    labels: &[u8],
    metric: Metric,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::Rng;
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(Error::Config("interval level must lie in (0, 1)".into()));
    }
    let n = scores.len();
    let mut rng = rng::stream(seed, 0xB007);
    let mut values = Vec::with_capacity(n_boot);
    let mut attempts = 0;
    while values.len() < n_boot {
        attempts += 1;
        if attempts > 10 * n_boot {
            return Err(Error::Numerical(
                "bootstrap resamples persistently single-class".into(),
            ));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        if metric == Metric::Auroc && (l.iter().all(|&v| v == 1) || l.iter().all(|&v| v == 0)) {
            continue;
        }
        values.push(metric_value(metric, &s, &l)?);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile(&values, alpha), percentile(&values, 1.0 - alpha)))
}

/// Spearman rank correlation with average ranks over ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Data("spearman needs two equal-length series".into()));
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                r[idx] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma).powi(2);
        vb += (rb[i] - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Numerical("constant series has no rank correlation".into()));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Linear-interpolation percentile of a sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// One (model, correction) evaluation cell, mirroring a table entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub correction: String,
    pub auroc: f64,
    pub auroc_lo: f64,
    pub auroc_hi: f64,
    pub brier: f64,
    pub brier_lo: f64,
    pub brier_hi: f64,
    pub n_test: usize,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "model,correction,auroc,auroc_lo,auroc_hi,brier,brier_lo,brier_hi,n_test"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.model,
            self.correction,
            self.auroc,
            self.auroc_lo,
            self.auroc_hi,
            self.brier,
            self.brier_lo,
            self.brier_hi,
            self.n_test
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.auroc_lo <= self.auroc + 1e-12
            && self.auroc <= self.auroc_hi + 1e-12
            && self.brier_lo <= self.brier + 1e-12
            && self.brier <= self.brier_hi + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Numerical("interval does not contain point estimate".into()))
        }
    }
}
