use rand::Rng;
use rand_distr::StandardNormal;

use super::{Mlp, NnError, Tape};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian log density, summed over dimensions.
pub fn gaussian_log_prob(mean: &[f64], std: &[f64], sample: &[f64]) -> Result<f64, NnError> {
    if mean.len() != sample.len() || std.len() != sample.len() {
        return Err(NnError::DimensionMismatch {
            expected: mean.len(),
            actual: sample.len(),
        });
    }
    let mut total = 0.0;
    for ((&m, &s), &x) in mean.iter().zip(std).zip(sample) {
        if !(s > 0.0) {
            return Err(NnError::InvalidStd(s));
        }
        let z = (x - m) / s;
        total += -0.5 * z * z - s.ln() - 0.5 * LN_2PI;
    }
    Ok(total)
}

/// Gaussian policy with an mlp mean and a state-independent learnable log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
    pub std_floor: f64,
}

/// Gradients of a [`GaussianHead`] objective, split by parameter group.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianHead {
    pub fn new(mean: Mlp, init_std: f64, std_floor: f64) -> Result<Self, NnError> {
        if !(std_floor > 0.0) {
            return Err(NnError::InvalidStd(std_floor));
        }
        if !(init_std > 0.0) {
            return Err(NnError::InvalidStd(init_std));
        }
        let dim = mean.output_dim();
        let log_std = vec![init_std.max(std_floor).ln(); dim];
        Ok(Self {
            mean,
            log_std,
            std_floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std
            .iter()
            .map(|l| l.exp().max(self.std_floor))
            .collect()
    }

    pub fn zero_grads(&self) -> HeadGrads {
        HeadGrads {
            mean: self.mean.zero_grads(),
            log_std: vec![0.0; self.dim()],
        }
    }

    pub fn num_params(&self) -> usize {
        self.mean.num_params() + self.dim()
    }

    pub fn mean_of(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.mean.forward(input)
    }

    /// Draws a sample and returns it together with the standard-normal noise used.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        input: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let noise: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let x = self.sample_with_noise(input, &noise)?;
        Ok((x, noise))
    }

    pub fn sample_with_noise(&self, input: &[f64], noise: &[f64]) -> Result<Vec<f64>, NnError> {
        let mu = self.mean.forward(input)?;
        Ok(mu
            .iter()
            .zip(self.std())
            .zip(noise)
            .map(|((m, s), n)| m + s * n)
            .collect())
    }

    pub fn log_prob(&self, input: &[f64], sample: &[f64]) -> Result<f64, NnError> {
        let mu = self.mean.forward(input)?;
        gaussian_log_prob(&mu, &self.std(), sample)
    }

    /// Sum over dimensions of the differential entropy.
    pub fn entropy(&self) -> f64 {
        self.std()
            .iter()
            .map(|s| 0.5 * (LN_2PI + 1.0) + s.ln())
            .sum()
    }

    /// Evaluates `log p(sample | input)` and accumulates
    /// `coef * d log p / d params` into `grads`.
    pub fn log_prob_with_grad(
        &self,
        input: &[f64],
        sample: &[f64],
        coef: f64,
        grads: &mut HeadGrads,
    ) -> Result<f64, NnError> {
        let tape: Tape = self.mean.forward_tape(input)?;
        let mu = tape.output();
        let std = self.std();
        let logp = gaussian_log_prob(mu, &std, sample)?;
        if coef != 0.0 {
            let mut upstream = vec![0.0; self.dim()];
            for d in 0..self.dim() {
                let s = std[d];
                let diff = sample[d] - mu[d];
                upstream[d] = coef * diff / (s * s);
                // the floor makes log-std inert below it
                if self.log_std[d].exp() > self.std_floor {
                    grads.log_std[d] += coef * (diff * diff / (s * s) - 1.0);
                }
            }
            self.mean.backward(&tape, &upstream, &mut grads.mean)?;
        }
        Ok(logp)
    }

    /// Accumulates `coef * d entropy / d log_std`.
    pub fn entropy_grad(&self, coef: f64, grads: &mut HeadGrads) {
        for (g, &l) in grads.log_std.iter_mut().zip(&self.log_std) {
            if l.exp() > self.std_floor {
                *g += coef;
            }
        }
    }

    /// Keeps `exp(log_std) >= std_floor` after an optimizer step.
    pub fn enforce_floor(&mut self) {
        let min = self.std_floor.ln();
        for l in &mut self.log_std {
            if *l < min {
                *l = min;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.is_finite() && self.log_std.iter().all(|l| l.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_density_at_zero() {
        let lp = gaussian_log_prob(&[0.0], &[1.0], &[0.0]).unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((lp - (-0.91894)).abs() < 1e-5);
    }

    #[test]
    fn symmetric_about_zero_mean() {
        let a = gaussian_log_prob(&[0.0], &[0.7], &[1.3]).unwrap();
        let b = gaussian_log_prob(&[0.0], &[0.7], &[-1.3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn factorizes_over_dimensions() {
        let joint = gaussian_log_prob(&[0.1, -0.4], &[0.5, 2.0], &[0.3, 1.0]).unwrap();
        let a = gaussian_log_prob(&[0.1], &[0.5], &[0.3]).unwrap();
        let b = gaussian_log_prob(&[-0.4], &[2.0], &[1.0]).unwrap();
        assert!((joint - (a + b)).abs() < 1e-14);
    }

    #[test]
    fn non_positive_std_is_rejected() {
        assert!(matches!(
            gaussian_log_prob(&[0.0], &[0.0], &[0.0]),
            Err(NnError::InvalidStd(_))
        ));
    }

    #[test]
    fn recorded_noise_reproduces_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[3, 8, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let head = GaussianHead::new(mlp, 0.5, 1e-3).unwrap();
        let input = [0.2, 0.1, -0.3];
        let (x, noise) = head.sample(&input, &mut rng).unwrap();
        assert_eq!(head.sample_with_noise(&input, &noise).unwrap(), x);
        assert!(head.log_prob(&input, &x).unwrap().is_finite());
    }

    #[test]
    fn floor_holds_after_enforcement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&[1, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let mut head = GaussianHead::new(mlp, 1.0, 1e-3).unwrap();
        head.log_std = vec![-40.0, 0.0];
        head.enforce_floor();
        assert!(head.std().iter().all(|&s| s >= 1e-3));
        assert!(head.log_prob(&[0.0], &[1e3, -1e3]).unwrap().is_finite());
    }
}
