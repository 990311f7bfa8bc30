use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};

/// Weights plus every buffer the supported update rules need.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub weights: Vec<f64>,
    /// Momentum buffer.
    pub velocity: Vec<f64>,
    /// Adagrad sum of squared gradients; never negative.
    pub accumulator: Vec<f64>,
    /// Running mean of iterates since averaging started.
    pub average: Vec<f64>,
    pub average_count: u64,
    /// Number of model updates applied so far.
    pub k: u64,
    pub rng: ChaCha8Rng,
}

impl OptimizerState {
    pub fn new(weights: Vec<f64>, rng: ChaCha8Rng) -> Self {
        let p = weights.len();
        Self {
            average: weights.clone(),
            weights,
            velocity: vec![0.0; p],
            accumulator: vec![0.0; p],
            average_count: 0,
            k: 0,
            rng,
        }
    }

    /// One mini-batch step `w ← w − γ g`, optionally with (Nesterov) momentum
    /// `v ← μ v + g`. `weight_decay` adds `λ w` to the gradient and must be
    /// zero when the objective already carries a ridge term.
    pub fn sgd_step(
        &mut self,
        grad: &[f64],
        gamma: f64,
        momentum: f64,
        nesterov: bool,
        weight_decay: f64,
    ) -> Result<()> {
        if !(gamma > 0.0) {
            return config_err(format!("step size must be positive, got {gamma}"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return config_err(format!("momentum must lie in [0, 1), got {momentum}"));
        }
        self.check_len(grad)?;
        for j in 0..self.weights.len() {
            let g = grad[j] + weight_decay * self.weights[j];
            let dir = if momentum == 0.0 {
                g
            } else {
                let v = momentum * self.velocity[j] + g;
                self.velocity[j] = v;
                if nesterov {
                    g + momentum * v
                } else {
                    v
                }
            };
            self.weights[j] -= gamma * dir;
        }
        self.k += 1;
        Ok(())
    }

    /// Adagrad: `a ← a + g⊙g`, `w ← w − γ g / (√a + ε)`. Coordinates whose
    /// accumulator is still zero are left alone.
    pub fn adagrad_step(&mut self, grad: &[f64], gamma: f64, eps: f64) -> Result<()> {
        if !(gamma > 0.0) || !(eps >= 0.0) {
            return config_err("adagrad needs gamma > 0 and eps >= 0");
        }
        self.check_len(grad)?;
        for j in 0..self.weights.len() {
            let g = grad[j];
            self.accumulator[j] += g * g;
            let denom = self.accumulator[j].sqrt() + eps;
            if denom > 0.0 {
                self.weights[j] -= gamma * g / denom;
            }
        }
        self.k += 1;
        Ok(())
    }

    /// Folds the current iterate into the running average once more than
    /// `t0` updates have been applied; before that the average tracks the
    /// iterate.
    pub fn asgd_update_average(&mut self, t0: u64) {
        if self.k <= t0 {
            self.average.copy_from_slice(&self.weights);
            self.average_count = 0;
            return;
        }
        self.average_count += 1;
        let inv = 1.0 / self.average_count as f64;
        for (a, w) in self.average.iter_mut().zip(&self.weights) {
            *a += (w - *a) * inv;
        }
    }

    fn check_len(&self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.weights.len() {
            return config_err(format!(
                "gradient has length {}, weights {}",
                grad.len(),
                self.weights.len()
            ));
        }
        Ok(())
    }
}
