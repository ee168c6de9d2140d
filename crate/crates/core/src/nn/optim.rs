use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW moment accumulators for one parameter group.
///
/// A group may span several disjoint slices (an mlp plus a log-std vector);
/// the accumulators are laid out in the order the slices are passed.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimState {
    pub fn new(num_params: usize, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        self.step_parts(&mut [params], &[grads])
    }

    /// One decoupled-weight-decay Adam update over a list of slices.
    ///
    /// The whole update is rejected (nothing is modified) if any gradient
    /// entry is non-finite.
    pub fn step_parts(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), NnError> {
        if params.len() != grads.len() {
            return Err(NnError::DimensionMismatch {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        let mut total = 0;
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(NnError::DimensionMismatch {
                    expected: p.len(),
                    actual: g.len(),
                });
            }
            total += p.len();
        }
        if total != self.m.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.m.len(),
                actual: total,
            });
        }
        let mut flat = 0;
        for g in grads {
            if let Some((i, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient {
                    index: flat + i,
                    value,
                });
            }
            flat += g.len();
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        let mut idx = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, &gi) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *pi = *pi * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
                idx += 1;
            }
        }
        Ok(())
    }
}

/// Rescales the gradient slices in place so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
