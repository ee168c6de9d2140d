use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::nn::{clip_grad_norm, layer_sizes, Activation, Mlp, NnError, OptimState};
use crate::policy::{DiffusionPolicy, StrideAdaptor};

use super::advantage::normalize;
use super::TrainError;

/// Scalar state-value network.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub net: Mlp,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Result<Self, NnError> {
        let net = Mlp::new(&layer_sizes(input, hidden, 1), Activation::Tanh, Activation::Identity, rng)?;
        Ok(Self { net })
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, NnError> {
        Ok(self.net.forward(x)?[0])
    }

    /// Accumulates `coef * d (v - target)^2` and returns the squared error.
    pub fn squared_error_grad(&self, x: &[f64], target: f64, coef: f64, grads: &mut [f64]) -> Result<f64, NnError> {
        let tape = self.net.forward_tape(x)?;
        let diff = tape.output()[0] - target;
        self.net.backward(&tape, &[2.0 * coef * diff], grads)?;
        Ok(diff * diff)
    }
}

/// Clipped-surrogate loss term `-min(r A, clip(r) A)` and its derivative
/// with respect to the new log-probability.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (-unclipped, -unclipped)
    } else {
        (-clipped, 0.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoSettings {
    pub epochs: usize,
    pub minibatch: usize,
    pub max_grad_norm: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

/// One denoising step as seen by the base-policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseSample<'a> {
    pub obs: &'a [f64],
    pub x: &'a [f64],
    pub level: usize,
    pub stride: usize,
    pub x_next: &'a [f64],
    pub logp_old: f64,
    pub advantage: f64,
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueSample<'a> {
    pub input: &'a [f64],
    pub target: f64,
}

/// One stride decision as seen by the adaptor update.
#[derive(Debug, Clone, PartialEq)]
pub struct StrideSample {
    pub features: Vec<f64>,
    /// Input of the adaptor critic.
    pub critic_features: Vec<f64>,
    pub raw_k: f64,
    pub logp_old: f64,
    pub advantage: f64,
    pub target: f64,
}

fn check_finite(v: f64, what: &str) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite {
            what: what.to_string(),
            iteration: 0,
        })
    }
}

/// Clipped PPO over every recorded denoising step, plus critic regression.
#[allow(clippy::too_many_arguments)]
pub fn dppo_update(
    policy: &mut DiffusionPolicy,
    critic: &mut ValueNet,
    actor_opt: &mut OptimState,
    critic_opt: &mut OptimState,
    samples: &[DenoiseSample<'_>],
    values: &[ValueSample<'_>],
    s: PpoSettings,
    rng: &mut dyn RngCore,
) -> Result<PpoStats, TrainError> {
    let mut stats = PpoStats::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut vorder: Vec<usize> = (0..values.len()).collect();
    let (mut batches, mut vbatches, mut clipped, mut seen) = (0usize, 0usize, 0usize, 0usize);
    let mb = s.minibatch.max(1);
    for _ in 0..s.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let adv = normalize(&idx.iter().map(|&i| samples[i].advantage).collect::<Vec<_>>());
            let mut grads = policy.model.net.zero_grads();
            let mut loss = 0.0;
            let scale = 1.0 / idx.len() as f64;
            for (&i, &a) in idx.iter().zip(&adv) {
                let smp = &samples[i];
                let step = policy.score_step(smp.obs, smp.x, smp.level, smp.stride, smp.x_next)?;
                let ratio = (step.logp - smp.logp_old).exp();
                let (l, dl) = clipped_surrogate(ratio, a, smp.clip);
                loss += l * scale;
                if dl == 0.0 {
                    clipped += 1;
                } else {
                    policy.accumulate(&step, dl * scale, &mut grads)?;
                }
                seen += 1;
            }
            check_finite(loss, "actor loss")?;
            clip_grad_norm(&mut [&mut grads], s.max_grad_norm);
            actor_opt.step(policy.model.net.params_mut(), &grads)?;
            stats.policy_loss += loss;
            batches += 1;
        }
        vorder.shuffle(rng);
        let vmb = values.len().div_ceil(samples.len().div_ceil(mb).max(1)).max(1);
        for idx in vorder.chunks(vmb) {
            let mut grads = critic.net.zero_grads();
            let scale = s.value_coef / idx.len() as f64;
            let mut loss = 0.0;
            for &i in idx {
                let v = &values[i];
                loss += critic.squared_error_grad(v.input, v.target, scale, &mut grads)? / idx.len() as f64;
            }
            check_finite(loss, "critic loss")?;
            clip_grad_norm(&mut [&mut grads], s.max_grad_norm);
            critic_opt.step(critic.net.params_mut(), &grads)?;
            stats.value_loss += loss;
            vbatches += 1;
        }
    }
    if batches > 0 {
        stats.policy_loss /= batches as f64;
    }
    if vbatches > 0 {
        stats.value_loss /= vbatches as f64;
    }
    if seen > 0 {
        stats.clip_fraction = clipped as f64 / seen as f64;
    }
    Ok(stats)
}

/// Clipped PPO on the stride adaptor with an entropy bonus and its own critic.
#[allow(clippy::too_many_arguments)]
pub fn ppo_adaptor_update(
    adaptor: &mut StrideAdaptor,
    critic: &mut ValueNet,
    opt: &mut OptimState,
    critic_opt: &mut OptimState,
    samples: &[StrideSample],
    clip: f64,
    s: PpoSettings,
    rng: &mut dyn RngCore,
) -> Result<PpoStats, TrainError> {
    let mut stats = PpoStats::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let (mut batches, mut clipped, mut seen) = (0usize, 0usize, 0usize);
    let mb = s.minibatch.max(1);
    for _ in 0..s.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let adv = normalize(&idx.iter().map(|&i| samples[i].advantage).collect::<Vec<_>>());
            let mut grads = adaptor.head.zero_grads();
            let mut vgrads = critic.net.zero_grads();
            let scale = 1.0 / idx.len() as f64;
            let (mut ploss, mut vloss) = (0.0, 0.0);
            for (&i, &a) in idx.iter().zip(&adv) {
                let smp = &samples[i];
                let logp = adaptor.head.log_prob(&smp.features, &[smp.raw_k])?;
                let ratio = (logp - smp.logp_old).exp();
                let (l, dl) = clipped_surrogate(ratio, a, clip);
                ploss += l * scale;
                if dl == 0.0 {
                    clipped += 1;
                } else {
                    adaptor.log_prob_with_grad(&smp.features, smp.raw_k, dl * scale, &mut grads)?;
                }
                seen += 1;
                vloss += critic.squared_error_grad(&smp.critic_features, smp.target, s.value_coef * scale, &mut vgrads)?
                    * scale;
            }
            // the entropy bonus enters the loss with a minus sign
            adaptor.head.entropy_grad(-s.entropy_coef, &mut grads);
            let entropy = adaptor.head.entropy();
            check_finite(ploss + s.value_coef * vloss - s.entropy_coef * entropy, "adaptor loss")?;
            clip_grad_norm(&mut [&mut grads.mean, &mut grads.log_std], s.max_grad_norm);
            clip_grad_norm(&mut [&mut vgrads], s.max_grad_norm);
            opt.step_parts(
                &mut [adaptor.head.mean.params_mut(), &mut adaptor.head.log_std],
                &[&grads.mean, &grads.log_std],
            )?;
            adaptor.head.enforce_floor();
            critic_opt.step(critic.net.params_mut(), &vgrads)?;
            stats.policy_loss += ploss;
            stats.value_loss += vloss;
            batches += 1;
        }
    }
    if batches > 0 {
        stats.policy_loss /= batches as f64;
        stats.value_loss /= batches as f64;
    }
    if seen > 0 {
        stats.clip_fraction = clipped as f64 / seen as f64;
    }
    stats.entropy = adaptor.head.entropy();
    Ok(stats)
}


#[cfg(test)]
mod bandit_tests {
    use super::*;
    use crate::nn::AdamWConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positive_advantage_raises_taken_stride_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut adaptor = StrideAdaptor::new(2, 2, 10, &[8], 5.0, 1.0, 1e-3, &mut rng).unwrap();
        let mut critic = ValueNet::new(5, &[8], &mut rng).unwrap();
        let features = vec![0.1, -0.2, 0.3, 0.0, 1.0];
        let samples: Vec<StrideSample> = [3.0, 7.0]
            .iter()
            .map(|&k| StrideSample {
                features: features.clone(),
                critic_features: features.clone(),
                raw_k: k,
                logp_old: adaptor.head.log_prob(&features, &[k]).unwrap(),
                advantage: if k > 5.0 { 1.0 } else { -1.0 },
                target: 0.0,
            })
            .collect();
        let before = adaptor.head.log_prob(&features, &[7.0]).unwrap();
        let mut opt = OptimState::new(adaptor.head.num_params(), AdamWConfig::new(1e-3, 0.0));
        let mut copt = OptimState::new(critic.net.num_params(), AdamWConfig::new(1e-3, 0.0));
        let s = PpoSettings {
            epochs: 1,
            minibatch: 2,
            max_grad_norm: 10.0,
            value_coef: 1.0,
            entropy_coef: 0.0,
        };
        ppo_adaptor_update(&mut adaptor, &mut critic, &mut opt, &mut copt, &samples, 0.2, s, &mut rng).unwrap();
        let after = adaptor.head.log_prob(&features, &[7.0]).unwrap();
        assert!(after > before, "{before} -> {after}");
        assert!(adaptor.mean(&[0.1, -0.2], &[0.3, 0.0], 10).unwrap() > 5.0);
    }
}
