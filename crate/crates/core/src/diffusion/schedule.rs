use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::nn::gaussian_log_prob;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(format!("unknown schedule kind `{other}` (linear|cosine)")),
        }
    }
}

/// Sampling noise mode for a reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Eta {
    /// eta = 0, the deterministic DDIM map.
    Deterministic,
    /// eta = 1, Gaussian transitions with a tractable likelihood.
    Stochastic,
}

impl Eta {
    pub fn value(self) -> f64 {
        match self {
            Eta::Deterministic => 0.0,
            Eta::Stochastic => 1.0,
        }
    }

    pub fn from_value(v: f64) -> Option<Self> {
        if v == 0.0 {
            Some(Eta::Deterministic)
        } else if v == 1.0 {
            Some(Eta::Stochastic)
        } else {
            None
        }
    }
}

/// A chunk at some noise level; level 0 is the clean action chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseState {
    pub x: Vec<f64>,
    pub level: usize,
}

/// `mu = x_coef * x_i + eps_coef * eps`, with transition std `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrideCoefficients {
    pub x_coef: f64,
    pub eps_coef: f64,
    pub sigma: f64,
}

/// Discrete noise schedule with `alpha_bar[0] = 1` and `alpha_bar[N] > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Largest per-step beta the linear default is allowed to reach.
pub const DEFAULT_BETA_CAP: f64 = 0.2;

impl NoiseSchedule {
    pub fn build(
        steps: usize,
        kind: ScheduleKind,
        beta_min: f64,
        beta_max: f64,
    ) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::InvalidSchedule("N must be >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = match kind {
            ScheduleKind::Linear => {
                if steps == 1 {
                    vec![beta_min]
                } else {
                    (0..steps)
                        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let c = ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
                    c * c
                };
                let f0 = f(0.0);
                (1..=steps)
                    .map(|i| {
                        let prev = f((i - 1) as f64) / f0;
                        let cur = f(i as f64) / f0;
                        (1.0 - cur / prev).clamp(beta_min, beta_max)
                    })
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    /// Linear schedule whose endpoints are the 1000-step range rescaled to
    /// `steps`, with beta capped at [`DEFAULT_BETA_CAP`].
    pub fn default_for(steps: usize) -> Result<Self, DiffusionError> {
        let (lo, hi) = default_beta_range(steps);
        Self::build(steps, ScheduleKind::Linear, lo, hi)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule("N must be >= 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "beta {b} outside (0, 1)"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, level: usize) -> f64 {
        self.alpha_bars[level]
    }

    fn check_stride(&self, level: usize, stride: usize) -> Result<(), DiffusionError> {
        if stride < 1 || stride > level || level > self.steps() {
            return Err(DiffusionError::InvalidStride { level, stride });
        }
        Ok(())
    }

    /// DDIM standard deviation for a jump of `stride` levels from `level`.
    pub fn sigma(&self, level: usize, stride: usize) -> Result<f64, DiffusionError> {
        self.check_stride(level, stride)?;
        let ab_i = self.alpha_bars[level];
        let ab_j = self.alpha_bars[level - stride];
        let var = (1.0 - ab_j) / (1.0 - ab_i) * (1.0 - ab_i / ab_j);
        Ok(var.max(0.0).sqrt())
    }

    /// Tweedie estimate of the clean chunk.
    pub fn predict_x0(&self, x: &[f64], eps: &[f64], level: usize) -> Vec<f64> {
        let ab = self.alpha_bars[level];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        x.iter().zip(eps).map(|(xi, ei)| (xi - sn * ei) / sa).collect()
    }

    pub fn coefficients(
        &self,
        level: usize,
        stride: usize,
        eta: Eta,
    ) -> Result<StrideCoefficients, DiffusionError> {
        let sigma = self.sigma(level, stride)?;
        let ab_i = self.alpha_bars[level];
        let ab_j = self.alpha_bars[level - stride];
        let ratio = (ab_j / ab_i).sqrt();
        let dir = (1.0 - ab_j - eta.value() * sigma * sigma).max(0.0).sqrt();
        Ok(StrideCoefficients {
            x_coef: ratio,
            eps_coef: dir - ratio * (1.0 - ab_i).sqrt(),
            sigma,
        })
    }

    /// Mean of the reverse transition `level -> level - stride`.
    ///
    /// The direction term uses `eta * sigma^2`, so `Eta::Deterministic` is the
    /// exact DDIM map and `Eta::Stochastic` the variance-preserving one.
    pub fn ddim_mean(
        &self,
        x: &[f64],
        eps: &[f64],
        level: usize,
        stride: usize,
        eta: Eta,
    ) -> Result<Vec<f64>, DiffusionError> {
        check_len(x, eps)?;
        self.check_stride(level, stride)?;
        let ab_j = self.alpha_bars[level - stride];
        let sigma = self.sigma(level, stride)?;
        let x0 = self.predict_x0(x, eps, level);
        let dir = (1.0 - ab_j - eta.value() * sigma * sigma).max(0.0).sqrt();
        let sa = ab_j.sqrt();
        Ok(x0.iter().zip(eps).map(|(x0i, ei)| sa * x0i + dir * ei).collect())
    }

    /// One reverse step. With `Eta::Stochastic` the noise std is
    /// `max(sigma, sigma_floor)`, the same std [`Self::denoise_log_prob`] scores.
    #[allow(clippy::too_many_arguments)]
    pub fn ddim_step<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        eps: &[f64],
        level: usize,
        stride: usize,
        eta: Eta,
        sigma_floor: f64,
        rng: &mut R,
    ) -> Result<DenoiseState, DiffusionError> {
        let mut mu = self.ddim_mean(x, eps, level, stride, eta)?;
        if eta == Eta::Stochastic {
            let std = self.sigma(level, stride)?.max(sigma_floor);
            for m in &mut mu {
                let z: f64 = rng.sample(StandardNormal);
                *m += std * z;
            }
        }
        Ok(DenoiseState {
            x: mu,
            level: level - stride,
        })
    }

    /// Log density of `x_next` under the stochastic transition from `level`.
    pub fn denoise_log_prob(
        &self,
        x: &[f64],
        eps: &[f64],
        level: usize,
        stride: usize,
        x_next: &[f64],
        sigma_floor: f64,
    ) -> Result<f64, DiffusionError> {
        check_len(x, x_next)?;
        let mu = self.ddim_mean(x, eps, level, stride, Eta::Stochastic)?;
        let std = self.sigma(level, stride)?.max(sigma_floor);
        Ok(gaussian_log_prob(&mu, &vec![std; mu.len()], x_next)?)
    }
}

/// Endpoints of the default linear schedule for `steps` levels.
pub fn default_beta_range(steps: usize) -> (f64, f64) {
    let scale = 1000.0 / steps.max(1) as f64;
    let hi = (0.02 * scale).min(DEFAULT_BETA_CAP);
    let lo = (1e-4 * scale).min(hi);
    (lo, hi)
}

fn check_len(a: &[f64], b: &[f64]) -> Result<(), DiffusionError> {
    if a.len() != b.len() {
        return Err(DiffusionError::Nn(crate::nn::NnError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        }));
    }
    Ok(())
}
