//! The base diffusion policy and the stride adaptor.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::diffusion::{DenoiseState, DiffusionError, EpsilonModel, Eta, NoiseSchedule};
use crate::nn::{layer_sizes, Activation, GaussianHead, HeadGrads, Mlp, NnError, Tape};

/// Noise-prediction network together with the schedule it denoises under.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy {
    pub model: EpsilonModel,
    pub schedule: NoiseSchedule,
    pub sigma_floor: f64,
    /// Bound applied to the clean-chunk estimate before each reverse step.
    pub x0_clip: Option<f64>,
}

impl DiffusionPolicy {
    pub fn new(model: EpsilonModel, schedule: NoiseSchedule, sigma_floor: f64) -> Result<Self, DiffusionError> {
        if model.steps() != schedule.steps() {
            return Err(DiffusionError::InvalidSchedule(format!(
                "model built for N={} but schedule has N={}",
                model.steps(),
                schedule.steps()
            )));
        }
        Ok(Self {
            model,
            schedule,
            sigma_floor,
            x0_clip: None,
        })
    }

    pub fn with_x0_clip(mut self, clip: Option<f64>) -> Self {
        self.x0_clip = clip;
        self
    }

    /// Noise consistent with the clipped clean-chunk estimate, and the mask
    /// of coordinates where the clip is inactive (derivative 1, else 0).
    fn clipped_eps(&self, x: &[f64], eps: &[f64], level: usize) -> (Vec<f64>, Vec<bool>) {
        let Some(c) = self.x0_clip else {
            return (eps.to_vec(), vec![true; eps.len()]);
        };
        let ab = self.schedule.alpha_bar(level);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = Vec::with_capacity(eps.len());
        let mut active = Vec::with_capacity(eps.len());
        for (xi, ei) in x.iter().zip(eps) {
            let x0 = (xi - sn * ei) / sa;
            if x0.abs() > c {
                out.push((xi - sa * x0.clamp(-c, c)) / sn);
                active.push(false);
            } else {
                out.push(*ei);
                active.push(true);
            }
        }
        (out, active)
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn chunk_dim(&self) -> usize {
        self.model.chunk_dim()
    }

    pub fn initial_chunk(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.chunk_dim()).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Takes one reverse step; returns the new state, the log-likelihood of
    /// the step under the stochastic transition (0 when deterministic) and
    /// the predicted noise.
    pub fn denoise(
        &self,
        obs: &[f64],
        x: &[f64],
        level: usize,
        stride: usize,
        eta: Eta,
        rng: &mut dyn RngCore,
    ) -> Result<(DenoiseState, f64), DiffusionError> {
        let raw = self.model.predict(obs, x, level)?;
        let (eps, _) = self.clipped_eps(x, &raw, level);
        let next = self
            .schedule
            .ddim_step(x, &eps, level, stride, eta, self.sigma_floor, rng)?;
        let logp = match eta {
            Eta::Stochastic => self.schedule.denoise_log_prob(
                x,
                &eps,
                level,
                stride,
                &next.x,
                self.sigma_floor,
            )?,
            Eta::Deterministic => 0.0,
        };
        Ok((next, logp))
    }

    /// Log-likelihood of a recorded step and `coef * d logp / d theta`
    /// accumulated into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn log_prob_with_grad(
        &self,
        obs: &[f64],
        x: &[f64],
        level: usize,
        stride: usize,
        x_next: &[f64],
        coef: f64,
        grads: &mut [f64],
    ) -> Result<f64, DiffusionError> {
        let step = self.score_step(obs, x, level, stride, x_next)?;
        if coef != 0.0 {
            self.accumulate(&step, coef, grads)?;
        }
        Ok(step.logp)
    }

    /// Forward half of [`Self::log_prob_with_grad`]; the gradient can be
    /// added later with any coefficient through [`Self::accumulate`].
    pub fn score_step(
        &self,
        obs: &[f64],
        x: &[f64],
        level: usize,
        stride: usize,
        x_next: &[f64],
    ) -> Result<ScoredStep, DiffusionError> {
        let c = self.schedule.coefficients(level, stride, Eta::Stochastic)?;
        let std = c.sigma.max(self.sigma_floor);
        let tape = self.model.forward_tape(obs, x, level)?;
        let (eps, active) = self.clipped_eps(x, tape.output(), level);
        let var = std * std;
        let mut logp = 0.0;
        let mut unit = vec![0.0; eps.len()];
        for d in 0..eps.len() {
            let mu = c.x_coef * x[d] + c.eps_coef * eps[d];
            let diff = x_next[d] - mu;
            logp += -0.5 * diff * diff / var - std.ln() - 0.5 * LN_2PI;
            if active[d] {
                unit[d] = c.eps_coef * diff / var;
            }
        }
        Ok(ScoredStep { tape, unit, logp })
    }

    pub fn accumulate(&self, step: &ScoredStep, coef: f64, grads: &mut [f64]) -> Result<(), NnError> {
        let up: Vec<f64> = step.unit.iter().map(|u| coef * u).collect();
        self.model.net.backward(&step.tape, &up, grads)?;
        Ok(())
    }
}

/// Cached forward pass of one recorded denoising step.
#[derive(Debug, Clone)]
pub struct ScoredStep {
    tape: Tape,
    unit: Vec<f64>,
    pub logp: f64,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Input features of the adaptor and its critic: observation, noisy chunk
/// and the normalized level.
pub fn joint_features(obs: &[f64], x: &[f64], level: usize, steps: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(obs.len() + x.len() + 1);
    v.extend_from_slice(obs);
    v.extend_from_slice(x);
    v.push(level as f64 / steps as f64);
    v
}

/// Gaussian policy over the raw stride `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrideAdaptor {
    pub head: GaussianHead,
    pub steps: usize,
}

impl StrideAdaptor {
    /// Builds an adaptor whose initial distribution is close to `N(c, v^2)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        chunk_dim: usize,
        steps: usize,
        hidden: &[usize],
        init_mean: f64,
        init_std: f64,
        std_floor: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let sizes = layer_sizes(obs_dim + chunk_dim + 1, hidden, 1);
        let mut mlp = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, rng)?;
        mlp.set_output_layer(0.01, &[init_mean]);
        let head = GaussianHead::new(mlp, init_std, std_floor)?;
        Ok(Self { head, steps })
    }

    pub fn mean(&self, obs: &[f64], x: &[f64], level: usize) -> Result<f64, NnError> {
        Ok(self.head.mean_of(&joint_features(obs, x, level, self.steps))?[0])
    }

    pub fn std(&self) -> f64 {
        self.head.std()[0]
    }

    pub fn log_prob_with_grad(
        &self,
        features: &[f64],
        raw: f64,
        coef: f64,
        grads: &mut HeadGrads,
    ) -> Result<f64, NnError> {
        self.head.log_prob_with_grad(features, &[raw], coef, grads)
    }
}

/// Chooses the raw stride at each denoising decision.
pub trait StridePolicy: Sync {
    /// Returns the raw stride and its log-probability (0 for non-random rules).
    fn sample_raw(
        &self,
        obs: &[f64],
        x: &[f64],
        level: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, f64), NnError>;
}

/// Constant stride.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedStride(pub usize);

impl StridePolicy for FixedStride {
    fn sample_raw(&self, _: &[f64], _: &[f64], _: usize, _: &mut dyn RngCore) -> Result<(f64, f64), NnError> {
        Ok((self.0 as f64, 0.0))
    }
}

impl StridePolicy for StrideAdaptor {
    fn sample_raw(
        &self,
        obs: &[f64],
        x: &[f64],
        level: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, f64), NnError> {
        let f = joint_features(obs, x, level, self.steps);
        let mu = self.head.mean_of(&f)?[0];
        let std = self.std();
        let z: f64 = rng.sample(StandardNormal);
        let raw = mu + std * z;
        let lp = crate::nn::gaussian_log_prob(&[mu], &[std], &[raw])?;
        Ok((raw, lp))
    }
}

/// Adaptor evaluated at its mean, used for deterministic evaluation.
#[derive(Debug, Clone, Copy)]
pub struct MeanStride<'a>(pub &'a StrideAdaptor);

impl StridePolicy for MeanStride<'_> {
    fn sample_raw(&self, obs: &[f64], x: &[f64], level: usize, _: &mut dyn RngCore) -> Result<(f64, f64), NnError> {
        Ok((self.0.mean(obs, x, level)?, 0.0))
    }
}
