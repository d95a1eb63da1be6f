//! Diagonal AdaGrad with decoupled-by-name L2 regularization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer hyperparameters plus per-parameter squared-gradient accumulators.
///
/// The accumulators are elementwise nonnegative and nondecreasing across
/// steps, so the effective per-coordinate step `lr / (sqrt(acc) + eps)`
/// shrinks monotonically under constant-magnitude gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaGradState {
    pub learning_rate: f64,
    pub epsilon: f64,
    /// L2 coefficient applied to weight tensors (not biases).
    pub weight_decay: f64,
    accumulators: HashMap<String, Vec<f64>>,
}

impl AdaGradState {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Result<Self> {
        Self::with_epsilon(learning_rate, weight_decay, 1e-6)
    }

    pub fn with_epsilon(learning_rate: f64, weight_decay: f64, epsilon: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::invalid("adagrad", format!("learning rate {} must be positive", learning_rate)));
        }
        if epsilon <= 0.0 {
            return Err(Error::invalid("adagrad", format!("epsilon {} must be positive", epsilon)));
        }
        if weight_decay < 0.0 {
            return Err(Error::invalid("adagrad", format!("weight decay {} must be nonnegative", weight_decay)));
        }
        Ok(AdaGradState {
            learning_rate,
            epsilon,
            weight_decay,
            accumulators: HashMap::new(),
        })
    }

    /// Applies one update to a named parameter from the given gradient.
    ///
    /// With decay enabled the effective gradient is `g + weight_decay * theta`;
    /// then `acc += g_eff^2` and `theta -= lr * g_eff / (sqrt(acc) + eps)`.
    pub fn step_param(&mut self, name: &str, value: &mut Tensor, grad: &[f64], apply_decay: bool) -> Result<()> {
        if grad.len() != value.numel() {
            return Err(Error::shape(
                "adagrad_step",
                format!("{} gradient elements", value.numel()),
                format!("{}", grad.len()),
            ));
        }
        let acc = self
            .accumulators
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        if acc.len() != grad.len() {
            return Err(Error::shape("adagrad_step", format!("{} accumulators", grad.len()), format!("{}", acc.len())));
        }
        let decay = if apply_decay { self.weight_decay } else { 0.0 };
        let data = value.data_mut();
        for i in 0..grad.len() {
            let g = grad[i] + decay * data[i];
            acc[i] += g * g;
            data[i] -= self.learning_rate * g / (acc[i].sqrt() + self.epsilon);
        }
        Ok(())
    }

    pub fn accumulator(&self, name: &str) -> Option<&[f64]> {
        self.accumulators.get(name).map(|v| v.as_slice())
    }
}
