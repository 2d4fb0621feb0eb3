//! Small multilayer perceptron: tanh hidden layers, sigmoid output,
//! weighted cross-entropy plus an L2 term on the weight matrices, trained
//! by mini-batch gradient descent with a fixed learning rate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::logistic::{sigmoid, softplus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        MlpSpec {
            hidden: vec![16, 16],
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 32,
            l2: 1e-4,
        }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden layer widths must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("mlp learning rate, epochs, batch size must be positive".into()));
        }
        if self.l2 < 0.0 {
            return Err(Error::Config("mlp l2 penalty must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    /// Per layer: weight matrix (out x in) and bias.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub l2: f64,
    pub warning: bool,
}

/// Parameter gradient, parallel to `MlpModel::weights` / `biases`.
pub struct MlpGradient {
    pub d_weights: Vec<DMatrix<f64>>,
    pub d_biases: Vec<DVector<f64>>,
}

impl MlpModel {
    pub fn n_features(&self) -> usize {
        self.weights[0].ncols()
    }

    /// Pre-sigmoid score for one input row.
    fn logit_one(&self, row: &DVector<f64>) -> f64 {
        let mut a = row.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a + b;
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            a = z;
        }
        a[0]
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(x.nrows(), |i, _| {
            sigmoid(self.logit_one(&x.row(i).transpose()))
        })
    }

    /// Full-batch weighted objective and its exact analytic gradient.
    pub fn loss_gradient(&self, x: &DMatrix<f64>, y: &[u8], w: &[f64]) -> (f64, MlpGradient) {
        let n = x.nrows();
        let n_layers = self.weights.len();
        let mut d_weights: Vec<DMatrix<f64>> =
            self.weights.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect();
        let mut d_biases: Vec<DVector<f64>> =
            self.biases.iter().map(|b| DVector::zeros(b.len())).collect();
        let mut loss = 0.0;
        for i in 0..n {
            let input = x.row(i).transpose();
            // forward pass, keeping activations
            let mut activations: Vec<DVector<f64>> = vec![input];
            for l in 0..n_layers {
                let mut z = &self.weights[l] * activations.last().unwrap() + &self.biases[l];
                if l < n_layers - 1 {
                    z.apply(|v| *v = v.tanh());
                }
                activations.push(z);
            }
            let logit = activations[n_layers][0];
            let yi = y[i] as f64;
            loss += w[i] * (softplus(logit) - yi * logit);
            // backward pass
            let mut delta = DVector::from_element(1, w[i] * (sigmoid(logit) - yi));
            for l in (0..n_layers).rev() {
                d_weights[l] += &delta * activations[l].transpose();
                d_biases[l] += &delta;
                if l > 0 {
                    let mut back = self.weights[l].transpose() * &delta;
                    for (v, a) in back.iter_mut().zip(activations[l].iter()) {
                        *v *= 1.0 - a * a; // tanh'
                    }
                    delta = back;
                }
            }
        }
        let nf = n as f64;
        loss /= nf;
        for l in 0..n_layers {
            d_weights[l] /= nf;
            d_weights[l] += self.l2 * &self.weights[l];
            d_biases[l] /= nf;
            loss += 0.5 * self.l2 * self.weights[l].iter().map(|v| v * v).sum::<f64>();
        }
        (loss, MlpGradient { d_weights, d_biases })
    }
}

pub(super) fn fit(
    spec: &MlpSpec,
    x: &DMatrix<f64>,
    y: &[u8],
    w: &[f64],
    seed: u64,
) -> Result<MlpModel> {
    use rand::Rng;
    let d = x.ncols();
    let mut dims = vec![d];
    dims.extend_from_slice(&spec.hidden);
    dims.push(1);
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut init_rng = rng::stream(seed, 100 + l as u64);
        weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| init_rng.random_range(-a..a)));
        biases.push(DVector::zeros(fan_out));
    }
    let mut model = MlpModel {
        weights,
        biases,
        l2: spec.l2,
        warning: super::single_class(y),
    };
    let n = x.nrows();
    let mut indices: Vec<usize> = (0..n).collect();
    for epoch in 0..spec.epochs {
        if spec.batch_size < n {
            use rand::seq::SliceRandom;
            let mut shuffle_rng = rng::stream(seed, 1000 + epoch as u64);
            indices.shuffle(&mut shuffle_rng);
        }
        for batch in indices.chunks(spec.batch_size) {
            let bx = DMatrix::from_fn(batch.len(), d, |i, j| x[(batch[i], j)]);
            let by: Vec<u8> = batch.iter().map(|&i| y[i]).collect();
            let bw: Vec<f64> = batch.iter().map(|&i| w[i]).collect();
            let (loss, grad) = model.loss_gradient(&bx, &by, &bw);
            if !loss.is_finite() {
                return Err(Error::Numerical(
                    "mlp loss diverged; reduce the learning rate".into(),
                ));
            }
            for l in 0..model.weights.len() {
                model.weights[l] -= spec.learning_rate * &grad.d_weights[l];
                model.biases[l] -= spec.learning_rate * &grad.d_biases[l];
            }
        }
    }
    Ok(model)
}
