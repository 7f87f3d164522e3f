//! Model abstraction: desk-scale linear and logistic regression with
//! deterministic mini-batch gradient descent.
//!
//! The parameter layout is `[w_0, ..., w_{d-1}, b]` (bias last, present when
//! `fit_intercept` is set). Training is bit-deterministic given the seed, so
//! a simulated run and a distributed run produce identical parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use feddart::ParameterVector;

use crate::data::Dataset;
use crate::error::{FactError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelType {
    Linear,
    Logistic,
}

/// Structural descriptor; fixes the parameter vector length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_features: usize,
    #[serde(default = "default_true")]
    pub fit_intercept: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(n_features: usize) -> Self {
        Self {
            n_features,
            fit_intercept: true,
        }
    }

    pub fn param_len(&self) -> usize {
        self.n_features + usize::from(self.fit_intercept)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    pub local_epochs: u32,
    /// Proximal coefficient, used when the aggregation algorithm is FEDPROX.
    #[serde(default = "default_mu")]
    pub mu: f64,
}

fn default_mu() -> f64 {
    0.01
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 0,
            local_epochs: 1,
            mu: default_mu(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregationAlgorithm {
    Fedavg,
    WeightedFedavg,
    Fedprox,
}

impl AggregationAlgorithm {
    /// Whether server-side aggregation weighs clients by sample count.
    pub fn weighted(self) -> bool {
        !matches!(self, AggregationAlgorithm::Fedavg)
    }
}

/// A model: its structure, training hyperparameters, aggregation algorithm
/// and current parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub model_type: ModelType,
    pub model_config: ModelConfig,
    pub hyperparameters: Hyperparameters,
    pub aggregation_algorithm: AggregationAlgorithm,
    pub parameters: ParameterVector,
}

impl Model {
    /// Zero-initialized model.
    pub fn new(
        model_type: ModelType,
        model_config: ModelConfig,
        hyperparameters: Hyperparameters,
        aggregation_algorithm: AggregationAlgorithm,
    ) -> Self {
        let parameters = ParameterVector::new(vec![0.0; model_config.param_len()], 0);
        Self {
            model_type,
            model_config,
            hyperparameters,
            aggregation_algorithm,
            parameters,
        }
    }

    pub fn loss(&self, data: &Dataset) -> f64 {
        loss(self.model_type, &self.model_config, &self.parameters.values, data)
    }
}

fn raw_prediction(config: &ModelConfig, params: &[f64], features: &[f64]) -> f64 {
    let mut z = 0.0;
    for (w, x) in params[..config.n_features].iter().zip(features) {
        z += w * x;
    }
    if config.fit_intercept {
        z += params[config.n_features];
    }
    z
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean loss over the dataset.
///
/// Linear: `1/(2n) sum (w.x + b - y)^2`. Logistic: mean negative
/// log-likelihood with targets in {0, 1}, computed in a numerically stable
/// form.
pub fn loss(model_type: ModelType, config: &ModelConfig, params: &[f64], data: &Dataset) -> f64 {
    let n = data.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (features, &target) in data.features.iter().zip(&data.targets) {
        let z = raw_prediction(config, params, features);
        total += match model_type {
            ModelType::Linear => {
                let r = z - target;
                0.5 * r * r
            }
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            ModelType::Logistic => z.max(0.0) - z * target + (-z.abs()).exp().ln_1p(),
        };
    }
    total / n as f64
}

/// Mean gradient of [`loss`] over the rows in `batch`.
pub fn gradient(
    model_type: ModelType,
    config: &ModelConfig,
    params: &[f64],
    data: &Dataset,
    batch: &[usize],
) -> Vec<f64> {
    let mut grad = vec![0.0; config.param_len()];
    if batch.is_empty() {
        return grad;
    }
    for &i in batch {
        let features = &data.features[i];
        let target = data.targets[i];
        let z = raw_prediction(config, params, features);
        let residual = match model_type {
            ModelType::Linear => z - target,
            ModelType::Logistic => sigmoid(z) - target,
        };
        for (g, x) in grad[..config.n_features].iter_mut().zip(features) {
            *g += residual * x;
        }
        if config.fit_intercept {
            grad[config.n_features] += residual;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    grad
}

/// Local mini-batch gradient descent, optionally with a proximal pull toward
/// `global` (the FedProx objective `loss + mu/2 * |w - w_global|^2`).
///
/// The loss gradient is applied explicitly and the proximal term implicitly,
/// so the update stays stable for arbitrarily large `mu`:
///
/// `w <- (w - lr * grad + lr * mu * w_global) / (1 + lr * mu)`
///
/// With `mu == 0` the branch reduces to the exact plain update `w - lr*grad`.
/// Batch order is drawn from a ChaCha stream, so equal seeds give bit-equal
/// trajectories.
pub fn train(
    model_type: ModelType,
    config: &ModelConfig,
    hyper: &Hyperparameters,
    start: &[f64],
    data: &Dataset,
    seed: u64,
    prox: Option<(&[f64], f64)>,
) -> Result<Vec<f64>> {
    if start.len() != config.param_len() {
        return Err(FactError::LengthMismatch(format!(
            "expected {} parameters, got {}",
            config.param_len(),
            start.len()
        )));
    }
    if let Some((global, _)) = prox {
        if global.len() != start.len() {
            return Err(FactError::LengthMismatch(
                "global parameter length differs from local".into(),
            ));
        }
    }
    let n = data.len();
    let mut params = start.to_vec();
    if n == 0 || hyper.local_epochs == 0 {
        return Ok(params);
    }
    let batch_size = if hyper.batch_size == 0 {
        n
    } else {
        hyper.batch_size.min(n)
    };
    let lr = hyper.learning_rate;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..hyper.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let grad = gradient(model_type, config, &params, data, batch);
            match prox {
                Some((global, mu)) if mu > 0.0 => {
                    let denom = 1.0 + lr * mu;
                    for ((w, g), wg) in params.iter_mut().zip(&grad).zip(global) {
                        *w = (*w - lr * g + lr * mu * wg) / denom;
                    }
                }
                _ => {
                    for (w, g) in params.iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
            }
        }
        if params.iter().any(|w| !w.is_finite()) {
            return Err(FactError::NonFiniteLoss(format!(
                "parameters diverged in epoch {epoch} (learning rate too high?)"
            )));
        }
    }
    let final_loss = loss(model_type, config, &params, data);
    if !final_loss.is_finite() {
        return Err(FactError::NonFiniteLoss(format!(
            "final loss is {final_loss}"
        )));
    }
    Ok(params)
}
