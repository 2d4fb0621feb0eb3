//! Shapley-value attribution under the marginal (interventional) expectation
//! convention: the value of a coalition S is the background-mean prediction
//! with the query point substituted on S. Exact subset enumeration for small
//! d, permutation sampling with reported standard errors otherwise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::ModelArtifact;
use crate::rng;
use crate::Dataset;

pub const MAX_EXACT_DIM: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ShapleyMode {
    Exact,
    Sampled { permutations: usize },
}

/// Per-feature attribution of one query point's prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapleyResult {
    pub phi: Vec<f64>,
    /// Standard errors, sampled mode only.
    pub stderr: Option<Vec<f64>>,
    /// Background mean prediction (the attribution baseline).
    pub base: f64,
    /// Model prediction at the query point.
    pub prediction: f64,
    pub mode: ShapleyMode,
}

impl ShapleyResult {
    /// Efficiency residual |Σφ − (f(x) − base)|; ≤ 1e-8 in exact mode.
    pub fn efficiency_residual(&self) -> f64 {
        (self.phi.iter().sum::<f64>() - (self.prediction - self.base)).abs()
    }

    /// CSV rows `feature,phi,mode,stderr` for one query point.
    pub fn to_csv(&self, feature_names: &[String]) -> Result<String> {
        if feature_names.len() != self.phi.len() {
            return Err(Error::Data("feature-name count does not match phi".into()));
        }
        let mode = match self.mode {
            ShapleyMode::Exact => "exact".to_string(),
            ShapleyMode::Sampled { permutations } => format!("sampled_{permutations}"),
        };
        let mut out = String::from("feature,phi,mode,stderr\n");
        for (j, name) in feature_names.iter().enumerate() {
            let se = match &self.stderr {
                Some(s) => format!("{:.6}", s[j]),
                None => String::new(),
            };
            out.push_str(&format!("{name},{:.6},{mode},{se}\n", self.phi[j]));
        }
        Ok(out)
    }
}

/// Substitute `x` into `row` on the coalition given by `mask`.
fn composite(x: &DVector<f64>, row: &DMatrix<f64>, r: usize, mask: u32, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| if mask >> j & 1 == 1 { x[j] } else { row[(r, j)] })
        .collect()
}

fn shapley_exact(
    predict: &dyn Fn(&DMatrix<f64>) -> Result<DVector<f64>>,
    background: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<(Vec<f64>, f64, f64)> {
    let d = x.len();
    let m = background.nrows();
    // v(S): background-mean prediction with x substituted on S
    let n_masks = 1usize << d;
    let mut v = vec![0.0; n_masks];
    for (mask, slot) in v.iter_mut().enumerate() {
        let mut z = DMatrix::zeros(m, d);
        for r in 0..m {
            let row = composite(x, background, r, mask as u32, d);
            for j in 0..d {
                z[(r, j)] = row[j];
            }
        }
        *slot = predict(&z)?.mean();
    }
    // coalition weights |S|! (d-|S|-1)! / d!
    let mut fact = vec![1.0f64; d + 1];
    for i in 1..=d {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight = |s: usize| fact[s] * fact[d - s - 1] / fact[d];
    let mut phi = vec![0.0; d];
    for mask in 0..n_masks {
        let s = (mask as u32).count_ones() as usize;
        for (j, p) in phi.iter_mut().enumerate() {
            if mask >> j & 1 == 0 {
                *p += weight(s) * (v[mask | (1 << j)] - v[mask]);
            }
        }
    }
    Ok((phi, v[0], v[n_masks - 1]))
}

fn shapley_sampled(
    predict: &dyn Fn(&DMatrix<f64>) -> Result<DVector<f64>>,
    background: &DMatrix<f64>,
    x: &DVector<f64>,
    permutations: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let d = x.len();
    let m = background.nrows();
    let mut rng = rng::stream(seed, 0x5A9);
    let mut sums = vec![0.0; d];
    let mut sq_sums = vec![0.0; d];
    for _ in 0..permutations {
        let r = rng.random_range(0..m);
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut rng);
        // evaluate the prefix chain b, b+π₁, b+π₁π₂, … in one batch
        let mut chain = DMatrix::zeros(d + 1, d);
        let mut mask = 0u32;
        for (step, &j) in std::iter::once(&usize::MAX).chain(order.iter()).enumerate() {
            if step > 0 {
                mask |= 1 << j;
            }
            let row = composite(x, background, r, mask, d);
            for k in 0..d {
                chain[(step, k)] = row[k];
            }
        }
        let preds = predict(&chain)?;
        for (step, &j) in order.iter().enumerate() {
            let c = preds[step + 1] - preds[step];
            sums[j] += c;
            sq_sums[j] += c * c;
        }
    }
    let n = permutations as f64;
    let phi: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let stderr: Vec<f64> = (0..d)
        .map(|j| {
            let var = (sq_sums[j] - sums[j] * sums[j] / n) / (n - 1.0).max(1.0);
            (var.max(0.0) / n).sqrt()
        })
        .collect();
    let base = predict(background)?.mean();
    let xq = DMatrix::from_fn(1, d, |_, j| x[j]);
    let prediction = predict(&xq)?[0];
    Ok((phi, stderr, base, prediction))
}

/// Shapley attribution of `model`'s prediction at `x` against a background
/// sample (marginal-expectation value function).
pub fn shapley_values(
    model: &ModelArtifact,
    background: &Dataset,
    x: &DVector<f64>,
    mode: ShapleyMode,
    seed: u64,
) -> Result<ShapleyResult> {
    let predict = |z: &DMatrix<f64>| model.predict_proba(z);
    shapley_values_fn(&predict, background.x(), x, mode, seed)
}

/// Attribution for an arbitrary prediction function (exposed so linear-model
/// oracles and custom links can be attributed directly).
pub fn shapley_values_fn(
    predict: &dyn Fn(&DMatrix<f64>) -> Result<DVector<f64>>,
    background: &DMatrix<f64>,
    x: &DVector<f64>,
    mode: ShapleyMode,
    seed: u64,
) -> Result<ShapleyResult> {
    if background.nrows() == 0 {
        return Err(Error::Data("empty Shapley background".into()));
    }
    if background.ncols() != x.len() {
        return Err(Error::Data("query dimension does not match background".into()));
    }
    match mode {
        ShapleyMode::Exact => {
            if x.len() > MAX_EXACT_DIM {
                return Err(Error::Config(format!(
                    "exact Shapley limited to {MAX_EXACT_DIM} features; got {}",
                    x.len()
                )));
            }
            let (phi, base, prediction) = shapley_exact(predict, background, x)?;
            Ok(ShapleyResult { phi, stderr: None, base, prediction, mode })
        }
        ShapleyMode::Sampled { permutations } => {
            if permutations == 0 {
                return Err(Error::Config("need at least one permutation".into()));
            }
            let (phi, stderr, base, prediction) =
                shapley_sampled(predict, background, x, permutations, seed)?;
            Ok(ShapleyResult { phi, stderr: Some(stderr), base, prediction, mode })
        }
    }
}

/// Mean |φⱼ| over query rows (subsampled to at most 500, seeded) for the
/// requested features — the quantity compared across correction methods.
pub fn mean_abs_shapley(
    model: &ModelArtifact,
    data: &Dataset,
    background: &Dataset,
    features: &[String],
    mode: ShapleyMode,
    seed: u64,
) -> Result<Vec<f64>> {
    use rand::seq::index::sample;
    let cols: Vec<usize> = features
        .iter()
        .map(|f| {
            data.feature_index(f)
                .ok_or_else(|| Error::Config(format!("unknown feature '{f}'")))
        })
        .collect::<Result<_>>()?;
    let n = data.n_rows();
    let rows: Vec<usize> = if n > 500 {
        let mut rng = rng::stream(seed, 0x5AB5);
        sample(&mut rng, n, 500).into_vec()
    } else {
        (0..n).collect()
    };
    let mut acc = vec![0.0; cols.len()];
    for (qi, &i) in rows.iter().enumerate() {
        let x = data.x().row(i).transpose();
        let res = shapley_values(model, background, &x, mode, rng::child_seed(seed, qi as u64))?;
        for (k, &j) in cols.iter().enumerate() {
            acc[k] += res.phi[j].abs();
        }
    }
    Ok(acc.iter().map(|v| v / rows.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{LogisticModel, LogisticSpec, MlpSpec, LearnerSpec};
    use crate::ratio::Weights;
    use rand::Rng;

    fn linear_predict(beta: Vec<f64>, intercept: f64) -> impl Fn(&DMatrix<f64>) -> Result<DVector<f64>> {
        move |z: &DMatrix<f64>| {
            Ok(DVector::from_fn(z.nrows(), |i, _| {
                intercept + (0..z.ncols()).map(|j| beta[j] * z[(i, j)]).sum::<f64>()
            }))
        }
    }

    fn random_background(m: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng::stream(seed, 0);
        DMatrix::from_fn(m, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn linear_model_matches_closed_form_and_is_efficient() {
        let d = 6;
        let beta = vec![1.5, -0.7, 0.0, 2.0, 0.3, -1.1];
        let f = linear_predict(beta.clone(), 0.4);
        let bg = random_background(30, d, 1);
        let x = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.1, -0.3, 1.2]);
        let res = shapley_values_fn(&f, &bg, &x, ShapleyMode::Exact, 0).unwrap();
        assert!(res.efficiency_residual() <= 1e-8);
        for j in 0..d {
            let expected = beta[j] * (x[j] - bg.column(j).mean());
            assert!((res.phi[j] - expected).abs() <= 1e-9, "phi[{j}]");
        }
    }

    #[test]
    fn null_player_gets_exact_zero() {
        // logistic model structurally ignoring features 0 and 2
        let model = ModelArtifact::Logistic(LogisticModel {
            beta: DVector::from_vec(vec![0.0, 1.5, 0.0]),
            intercept: -0.2,
            warning: false,
        });
        let bg = Dataset::new(
            random_background(25, 3, 2),
            (0..25).map(|i| (i % 2) as u8).collect(),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let x = DVector::from_vec(vec![1.0, 0.5, -1.0]);
        let res = shapley_values(&model, &bg, &x, ShapleyMode::Exact, 0).unwrap();
        assert_eq!(res.phi[0], 0.0);
        assert_eq!(res.phi[2], 0.0);
        assert!(res.phi[1] != 0.0);
    }

    #[test]
    fn symmetric_features_get_equal_attribution() {
        let model = ModelArtifact::Logistic(LogisticModel {
            beta: DVector::from_vec(vec![0.8, 0.8]),
            intercept: 0.1,
            warning: false,
        });
        // exchangeable background: every row mirrored
        let half = random_background(15, 2, 3);
        let mut bg_x = DMatrix::zeros(30, 2);
        for i in 0..15 {
            bg_x[(i, 0)] = half[(i, 0)];
            bg_x[(i, 1)] = half[(i, 1)];
            bg_x[(15 + i, 0)] = half[(i, 1)];
            bg_x[(15 + i, 1)] = half[(i, 0)];
        }
        let bg = Dataset::new(bg_x, (0..30).map(|i| (i % 2) as u8).collect(), vec!["a".into(), "b".into()]).unwrap();
        let x = DVector::from_vec(vec![0.7, 0.7]);
        let res = shapley_values(&model, &bg, &x, ShapleyMode::Exact, 0).unwrap();
        assert!((res.phi[0] - res.phi[1]).abs() <= 1e-9);
    }

    #[test]
    fn efficiency_fuzzed_across_models_and_points() {
        let mut rng = rng::stream(4, 0);
        let bg = random_background(20, 4, 5);
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let train_x = random_background(40, 4, 6);
        let names: Vec<String> = (0..4).map(|j| format!("f{j}")).collect();
        let train = Dataset::new(train_x, y, names.clone()).unwrap();
        let specs = [
            LearnerSpec::Logistic(LogisticSpec::default()),
            LearnerSpec::Mlp(MlpSpec { hidden: vec![5], epochs: 20, ..Default::default() }),
        ];
        let bg_data = Dataset::new(bg, (0..20).map(|i| (i % 2) as u8).collect(), names).unwrap();
        for spec in &specs {
            let model =
                crate::learners::fit(spec, train.x(), train.y(), &Weights::uniform(40), 0).unwrap();
            for _ in 0..5 {
                let x = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
                let res = shapley_values(&model, &bg_data, &x, ShapleyMode::Exact, 0).unwrap();
                assert!(res.efficiency_residual() <= 1e-8, "{}", spec.family_name());
            }
        }
    }

    #[test]
    fn sampled_mode_agrees_with_exact_within_stderr() {
        let d = 6;
        let beta = vec![1.0, -0.5, 0.9, 0.0, 1.7, -1.2];
        let f = linear_predict(beta, 0.0);
        let bg = random_background(40, d, 7);
        let x = DVector::from_vec(vec![0.3, 1.1, -0.8, 0.5, -1.5, 0.2]);
        let exact = shapley_values_fn(&f, &bg, &x, ShapleyMode::Exact, 0).unwrap();
        let sampled =
            shapley_values_fn(&f, &bg, &x, ShapleyMode::Sampled { permutations: 2000 }, 1).unwrap();
        let se = sampled.stderr.as_ref().unwrap();
        for j in 0..d {
            let gap = (sampled.phi[j] - exact.phi[j]).abs();
            assert!(gap <= 3.0 * se[j].max(1e-12), "phi[{j}]: gap {gap}, se {}", se[j]);
        }
    }

    #[test]
    fn stderr_scales_like_inverse_sqrt_permutations() {
        let f = linear_predict(vec![1.0, -2.0, 0.5], 0.0);
        let bg = random_background(30, 3, 8);
        let x = DVector::from_vec(vec![1.0, 0.5, -0.5]);
        let mut ses = Vec::new();
        for &p in &[500usize, 2000, 8000] {
            let res =
                shapley_values_fn(&f, &bg, &x, ShapleyMode::Sampled { permutations: p }, 2).unwrap();
            ses.push(res.stderr.unwrap()[1]);
        }
        // quadrupling samples should halve the stderr, within a factor of 2
        for w in ses.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio >= 1.0 && ratio <= 4.0, "stderr ratio {ratio}");
        }
    }

    #[test]
    fn exact_mode_rejects_high_dimension_and_empty_background() {
        let f = linear_predict(vec![0.0; 21], 0.0);
        let bg = random_background(5, 21, 9);
        let x = DVector::zeros(21);
        assert!(shapley_values_fn(&f, &bg, &x, ShapleyMode::Exact, 0).is_err());
        let empty = DMatrix::zeros(0, 3);
        let f3 = linear_predict(vec![0.0; 3], 0.0);
        assert!(shapley_values_fn(&f3, &empty, &DVector::zeros(3), ShapleyMode::Exact, 0).is_err());
    }

    #[test]
    fn constant_model_all_summaries_zero() {
        let model = ModelArtifact::Logistic(LogisticModel {
            beta: DVector::zeros(2),
            intercept: 0.7,
            warning: false,
        });
        let names = vec!["a".to_string(), "b".to_string()];
        let data = Dataset::new(
            random_background(12, 2, 10),
            (0..12).map(|i| (i % 2) as u8).collect(),
            names.clone(),
        )
        .unwrap();
        let summary =
            mean_abs_shapley(&model, &data, &data, &names, ShapleyMode::Exact, 0).unwrap();
        assert_eq!(summary, vec![0.0, 0.0]);
    }

    #[test]
    fn single_row_summary_equals_point_attribution() {
        let model = ModelArtifact::Logistic(LogisticModel {
            beta: DVector::from_vec(vec![1.2, -0.4]),
            intercept: 0.0,
            warning: false,
        });
        let names = vec!["a".to_string(), "b".to_string()];
        let bg = Dataset::new(
            random_background(20, 2, 11),
            (0..20).map(|i| (i % 2) as u8).collect(),
            names.clone(),
        )
        .unwrap();
        let one = Dataset::new(
            DMatrix::from_row_slice(1, 2, &[0.9, -0.3]),
            vec![1],
            names.clone(),
        )
        .unwrap();
        let summary = mean_abs_shapley(&model, &one, &bg, &names, ShapleyMode::Exact, 0).unwrap();
        let point = shapley_values(
            &model,
            &bg,
            &DVector::from_vec(vec![0.9, -0.3]),
            ShapleyMode::Exact,
            0,
        )
        .unwrap();
        assert!((summary[0] - point.phi[0].abs()).abs() <= 1e-15);
        assert!((summary[1] - point.phi[1].abs()).abs() <= 1e-15);
    }

    #[test]
    fn csv_export_shape() {
        let res = ShapleyResult {
            phi: vec![0.25, -0.5],
            stderr: None,
            base: 0.5,
            prediction: 0.25,
            mode: ShapleyMode::Exact,
        };
        let csv = res.to_csv(&["sbp".to_string(), "dbp".to_string()]).unwrap();
        assert_eq!(csv, "feature,phi,mode,stderr\nsbp,0.250000,exact,\ndbp,-0.500000,exact,\n");
        assert!(res.to_csv(&["one".to_string()]).is_err());
    }
}
