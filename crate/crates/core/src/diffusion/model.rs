use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DiffusionError, NoiseSchedule};
use crate::nn::{layer_sizes, Activation, Mlp, NnError, Tape};

/// Anything that predicts the noise component of a chunk at a given level.
pub trait NoisePredictor {
    fn predict_noise(&self, obs: &[f64], x: &[f64], level: usize) -> Result<Vec<f64>, NnError>;
}

pub const LEVEL_FEATURES: usize = 3;

/// Embedding of the noise level fed to the noise network.
pub fn level_features(level: usize, steps: usize) -> [f64; LEVEL_FEATURES] {
    let t = level as f64 / steps as f64;
    let a = std::f64::consts::PI * t;
    [t, a.sin(), a.cos()]
}

/// Noise-prediction network over `(obs, chunk, level)`.
///
/// `predict` counts every inference evaluation; training passes through
/// `forward_tape` are not counted.
#[derive(Debug)]
pub struct EpsilonModel {
    pub net: Mlp,
    obs_dim: usize,
    chunk_dim: usize,
    steps: usize,
    evaluations: AtomicU64,
}

impl Clone for EpsilonModel {
    fn clone(&self) -> Self {
        Self {
            net: self.net.clone(),
            obs_dim: self.obs_dim,
            chunk_dim: self.chunk_dim,
            steps: self.steps,
            evaluations: AtomicU64::new(self.evaluations()),
        }
    }
}

impl PartialEq for EpsilonModel {
    fn eq(&self, other: &Self) -> bool {
        self.net == other.net
            && self.obs_dim == other.obs_dim
            && self.chunk_dim == other.chunk_dim
            && self.steps == other.steps
    }
}

impl EpsilonModel {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        chunk_dim: usize,
        steps: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let sizes = layer_sizes(obs_dim + chunk_dim + LEVEL_FEATURES, hidden, chunk_dim);
        let net = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, rng)?;
        Self::from_net(net, obs_dim, chunk_dim, steps)
    }

    pub fn from_net(net: Mlp, obs_dim: usize, chunk_dim: usize, steps: usize) -> Result<Self, NnError> {
        if net.input_dim() != obs_dim + chunk_dim + LEVEL_FEATURES {
            return Err(NnError::DimensionMismatch {
                expected: obs_dim + chunk_dim + LEVEL_FEATURES,
                actual: net.input_dim(),
            });
        }
        if net.output_dim() != chunk_dim {
            return Err(NnError::DimensionMismatch {
                expected: chunk_dim,
                actual: net.output_dim(),
            });
        }
        if steps == 0 {
            return Err(NnError::InvalidShape("noise model needs N >= 1".into()));
        }
        Ok(Self {
            net,
            obs_dim,
            chunk_dim,
            steps,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn chunk_dim(&self) -> usize {
        self.chunk_dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn input(&self, obs: &[f64], x: &[f64], level: usize) -> Result<Vec<f64>, NnError> {
        if obs.len() != self.obs_dim {
            return Err(NnError::DimensionMismatch {
                expected: self.obs_dim,
                actual: obs.len(),
            });
        }
        if x.len() != self.chunk_dim {
            return Err(NnError::DimensionMismatch {
                expected: self.chunk_dim,
                actual: x.len(),
            });
        }
        let mut v = Vec::with_capacity(self.net.input_dim());
        v.extend_from_slice(obs);
        v.extend_from_slice(x);
        v.extend_from_slice(&level_features(level, self.steps));
        Ok(v)
    }

    pub fn predict(&self, obs: &[f64], x: &[f64], level: usize) -> Result<Vec<f64>, NnError> {
        let input = self.input(obs, x, level)?;
        let out = self.net.forward(&input)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    pub fn forward_tape(&self, obs: &[f64], x: &[f64], level: usize) -> Result<Tape, NnError> {
        self.net.forward_tape(&self.input(obs, x, level)?)
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) -> u64 {
        self.evaluations.swap(0, Ordering::Relaxed)
    }

    /// Accumulates the gradient of `0.5 * sum (pred - eps)^2` scaled by
    /// `2 * scale`, i.e. `scale * d sum (pred - eps)^2`, and returns the
    /// unscaled squared error.
    pub fn squared_error_grad(
        &self,
        obs: &[f64],
        x: &[f64],
        level: usize,
        target: &[f64],
        scale: f64,
        grads: &mut [f64],
    ) -> Result<f64, NnError> {
        let tape = self.forward_tape(obs, x, level)?;
        let pred = tape.output();
        let mut up = vec![0.0; pred.len()];
        let mut sq = 0.0;
        for d in 0..pred.len() {
            let diff = pred[d] - target[d];
            sq += diff * diff;
            up[d] = 2.0 * scale * diff;
        }
        self.net.backward(&tape, &up, grads)?;
        Ok(sq)
    }

    /// One-sample DDPM objective with gradients accumulated into `grads`
    /// (scaled by `scale`). Returns the per-dimension mean squared error.
    pub fn ddpm_loss_grad<R: Rng + ?Sized>(
        &self,
        schedule: &NoiseSchedule,
        obs: &[f64],
        x0: &[f64],
        scale: f64,
        grads: &mut [f64],
        rng: &mut R,
    ) -> Result<f64, DiffusionError> {
        let (level, xi, eps) = corrupt(schedule, x0, rng);
        let d = x0.len() as f64;
        let sq = self.squared_error_grad(obs, &xi, level, &eps, scale / d, grads)?;
        Ok(sq / d)
    }
}

impl NoisePredictor for EpsilonModel {
    fn predict_noise(&self, obs: &[f64], x: &[f64], level: usize) -> Result<Vec<f64>, NnError> {
        self.predict(obs, x, level)
    }
}

/// Samples `i ~ U{1..N}`, `eps ~ N(0, I)` and forms the noised chunk.
pub fn corrupt<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x0: &[f64],
    rng: &mut R,
) -> (usize, Vec<f64>, Vec<f64>) {
    let level = rng.random_range(1..=schedule.steps());
    let ab = schedule.alpha_bar(level);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let xi = x0.iter().zip(&eps).map(|(x, e)| sa * x + sn * e).collect();
    (level, xi, eps)
}

/// Squared error between predicted and true noise, summed over the chunk.
///
/// The per-dimension mean used during training is this divided by the chunk
/// dimension; the sum is reported here so a zero predictor has expectation
/// equal to the chunk dimension.
pub fn ddpm_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    obs: &[f64],
    x0: &[f64],
    rng: &mut R,
) -> Result<f64, DiffusionError> {
    let (level, xi, eps) = corrupt(schedule, x0, rng);
    let pred = model.predict_noise(obs, &xi, level)?;
    Ok(pred.iter().zip(&eps).map(|(p, e)| (p - e) * (p - e)).sum())
}
