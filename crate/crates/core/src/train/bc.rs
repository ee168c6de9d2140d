use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::envs::{Environment, PointMassEnv, ScriptedExpert};
use crate::nn::{clip_grad_norm, AdamWConfig, OptimState};
use crate::policy::DiffusionPolicy;

use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct BcConfig {
    pub episodes: usize,
    /// Std of the Gaussian noise added to executed expert actions.
    pub action_noise: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            action_noise: 0.05,
            epochs: 150,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-6,
        }
    }
}

/// `(observation, clean expert chunk)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Demonstrations {
    pub obs: Vec<Vec<f64>>,
    pub chunks: Vec<Vec<f64>>,
}

impl Demonstrations {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Rolls out the expert, executing noisy copies of its chunks but recording
/// the clean ones as labels.
pub fn collect_demonstrations(
    env: &mut PointMassEnv,
    expert: &mut ScriptedExpert,
    episodes: usize,
    action_noise: f64,
    rng: &mut dyn RngCore,
) -> Result<Demonstrations, TrainError> {
    let mut data = Demonstrations::default();
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        expert.begin_episode(env, rng);
        while !env.is_done() {
            let chunk = expert.chunk(env);
            let mut exec = chunk.clone();
            for a in &mut exec {
                let z: f64 = rng.sample(StandardNormal);
                *a += action_noise * z;
            }
            env.spec().clamp_chunk(&mut exec);
            data.obs.push(obs);
            data.chunks.push(chunk);
            obs = env.step_chunk(&exec)?.obs;
        }
    }
    Ok(data)
}

/// Fits the noise network to the demonstrations with the DDPM objective.
/// Returns the mean loss of each epoch.
pub fn pretrain(
    policy: &mut DiffusionPolicy,
    data: &Demonstrations,
    cfg: &BcConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("no demonstrations to pretrain on".into()));
    }
    let mut opt = OptimState::new(
        policy.model.net.num_params(),
        AdamWConfig::new(cfg.lr, cfg.weight_decay),
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let bs = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(bs) {
            let mut grads = policy.model.net.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                total += policy.model.ddpm_loss_grad(
                    &policy.schedule,
                    &data.obs[i],
                    &data.chunks[i],
                    scale,
                    &mut grads,
                    rng,
                )?;
            }
            clip_grad_norm(&mut [&mut grads], 10.0);
            opt.step(policy.model.net.params_mut(), &grads)?;
        }
        history.push(total / data.len() as f64);
    }
    Ok(history)
}
