use std::fmt::Write as _;

use log::{debug, info};
use rayon::prelude::*;

use crate::config::{Config, RunMode};
use crate::diffusion::{EpsilonModel, Eta};
use crate::dyndenoise::{rollout_episode, EpisodeRollout};
use crate::envs::{Environment, PointMassEnv, ScriptedExpert};
use crate::nn::{AdamWConfig, OptimState};
use crate::policy::{joint_features, DiffusionPolicy, FixedStride, StrideAdaptor, StridePolicy};
use crate::rng::{purpose, stream};

use super::advantage::{adaptor_reward, dppo_clip, env_advantage, gae};
use super::bc::{collect_demonstrations, pretrain};
use super::ppo::{
    dppo_update, ppo_adaptor_update, DenoiseSample, PpoSettings, PpoStats, StrideSample, ValueNet, ValueSample,
};
use super::stage::{Stage, StageController};
use super::TrainError;

/// Every network trained during fine-tuning, with its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Learners {
    pub policy: DiffusionPolicy,
    pub critic: ValueNet,
    pub adaptor: StrideAdaptor,
    pub adaptor_critic: ValueNet,
    pub actor_opt: OptimState,
    pub critic_opt: OptimState,
    pub adaptor_opt: OptimState,
    pub adaptor_critic_opt: OptimState,
}

/// Everything needed to continue a run from the next iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub learners: Learners,
    pub stages: StageController,
    /// Completed iterations.
    pub iteration: usize,
    pub env_steps: u64,
    pub warmup_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub env_steps: u64,
    pub mean_return: f64,
    pub success_rate: f64,
    pub mean_nfe_per_action: f64,
    pub mean_total_nfe: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub adaptor_loss: f64,
    pub adaptor_entropy: f64,
    pub stage: String,
}

impl MetricsRow {
    pub const HEADER: &'static str = "iter,env_steps,mean_return,success_rate,mean_nfe_per_action,mean_total_nfe,actor_loss,critic_loss,adaptor_loss,adaptor_entropy,stage";

    pub fn csv_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.env_steps,
            self.mean_return,
            self.success_rate,
            self.mean_nfe_per_action,
            self.mean_total_nfe,
            self.actor_loss,
            self.critic_loss,
            self.adaptor_loss,
            self.adaptor_entropy,
            self.stage
        );
        s
    }
}

/// Builds the noise model and clones it onto expert demonstrations.
/// Returns the policy and the per-epoch BC loss.
pub fn pretrain_base(cfg: &Config) -> Result<(DiffusionPolicy, Vec<f64>), TrainError> {
    let mut env = cfg.env.build()?;
    let seed = cfg.run.seed;
    let mut init = stream(seed, &[purpose::INIT, 0]);
    let model = EpsilonModel::new(
        env.spec().obs_dim,
        env.spec().chunk_dim(),
        cfg.diffusion.steps,
        &cfg.diffusion.hidden,
        &mut init,
    )?;
    let mut policy = DiffusionPolicy::new(model, cfg.diffusion.schedule()?, cfg.diffusion.sigma_floor)?
        .with_x0_clip(cfg.diffusion.x0_clip());
    let mut expert = ScriptedExpert::default();
    let mut demo_rng = stream(seed, &[purpose::DEMOS]);
    let data = collect_demonstrations(&mut env, &mut expert, cfg.bc.episodes, cfg.bc.action_noise, &mut demo_rng)?;
    info!("collected {} demonstration chunks", data.len());
    let mut bc_rng = stream(seed, &[purpose::PRETRAIN]);
    let losses = pretrain(&mut policy, &data, &cfg.bc, &mut bc_rng)?;
    if let Some(l) = losses.last() {
        info!("behaviour cloning finished, final loss {l:.5}");
    }
    Ok((policy, losses))
}

/// Fresh fine-tuning state around a pretrained base policy.
pub fn init_state(cfg: &Config, mut policy: DiffusionPolicy) -> Result<TrainState, TrainError> {
    if policy.steps() != cfg.diffusion.steps {
        return Err(TrainError::Config(format!(
            "base policy has N={} but diffusion.steps = {}",
            policy.steps(),
            cfg.diffusion.steps
        )));
    }
    let env = cfg.env.build()?;
    let (obs_dim, chunk_dim) = (env.spec().obs_dim, env.spec().chunk_dim());
    policy.sigma_floor = cfg.diffusion.sigma_floor.max(cfg.dppo.min_std);
    let mut rng = stream(cfg.run.seed, &[purpose::INIT, 1]);
    let critic = ValueNet::new(obs_dim + 1, &cfg.dppo.critic_hidden, &mut rng)?;
    let a = &cfg.adaptor;
    let adaptor = StrideAdaptor::new(
        obs_dim,
        chunk_dim,
        cfg.diffusion.steps,
        &a.hidden,
        a.init_mean,
        a.init_std,
        a.std_floor,
        &mut rng,
    )?;
    let adaptor_critic = ValueNet::new(obs_dim + chunk_dim + 2, &a.hidden, &mut rng)?;
    let p = &cfg.dppo;
    let learners = Learners {
        actor_opt: OptimState::new(
            policy.model.net.num_params(),
            AdamWConfig::new(p.actor_lr, p.actor_weight_decay),
        ),
        critic_opt: OptimState::new(critic.net.num_params(), AdamWConfig::new(p.critic_lr, p.critic_weight_decay)),
        adaptor_opt: OptimState::new(adaptor.head.num_params(), AdamWConfig::new(a.lr, a.weight_decay)),
        adaptor_critic_opt: OptimState::new(adaptor_critic.net.num_params(), AdamWConfig::new(a.lr, a.weight_decay)),
        policy,
        critic,
        adaptor,
        adaptor_critic,
    };
    Ok(TrainState {
        learners,
        stages: stage_controller(cfg),
        iteration: 0,
        env_steps: 0,
        warmup_iterations: 0,
    })
}

pub fn stage_controller(cfg: &Config) -> StageController {
    let a = &cfg.adaptor;
    StageController::new(a.zeta1, a.zeta2, a.warmup_stride(), a.epochs, a.epochs_slow)
}

/// Episodes gathered per iteration: enough whole episodes to cover
/// `run.rollout_steps` action chunks.
pub fn episodes_per_iteration(cfg: &Config, env: &PointMassEnv) -> usize {
    cfg.run.rollout_steps.div_ceil(env.spec().chunks_per_episode()).max(1)
}

/// Critic input: the features plus the elapsed fraction of the episode, so
/// values can account for the time left before the horizon.
pub fn with_time(features: &[f64], t: usize, horizon: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(features.len() + 1);
    v.extend_from_slice(features);
    v.push(t as f64 / horizon);
    v
}

/// Steps one iteration at a time through the staged schedule.
pub struct Trainer {
    pub cfg: Config,
    pub state: TrainState,
    env: PointMassEnv,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(cfg: Config, state: TrainState) -> Result<Self, TrainError> {
        if cfg.diffusion.eta_train != Eta::Stochastic {
            return Err(TrainError::Config(
                "fine-tuning needs diffusion.eta_train = 1 for a stochastic chain".into(),
            ));
        }
        let env = cfg.env.build()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.workers)
            .build()
            .map_err(|e| TrainError::Config(format!("cannot start {} workers: {e}", cfg.run.workers)))?;
        Ok(Self { cfg, state, env, pool })
    }

    pub fn env(&self) -> &PointMassEnv {
        &self.env
    }

    pub fn finished(&self) -> bool {
        self.state.iteration >= self.cfg.run.iterations
    }

    fn adaptive(&self) -> bool {
        self.cfg.run.mode == RunMode::Adaptive
    }

    fn stage_label(&self) -> String {
        if self.adaptive() {
            self.state.stages.stage.to_string()
        } else {
            "fixed".into()
        }
    }

    fn collect(&self, n_episodes: usize) -> Result<Vec<EpisodeRollout>, TrainError> {
        let l = &self.state.learners;
        let fixed = match (self.cfg.run.mode, self.state.stages.stage) {
            (RunMode::Fixed, _) => Some(FixedStride(self.cfg.run.fixed_stride)),
            (RunMode::Adaptive, Stage::Warmup) => Some(FixedStride(self.state.stages.warmup_stride)),
            _ => None,
        };
        let strides: &dyn StridePolicy = match &fixed {
            Some(f) => f,
            None => &l.adaptor,
        };
        let (seed, iter) = (self.cfg.run.seed, self.state.iteration as u64);
        let eta = self.cfg.diffusion.eta_train;
        self.pool.install(|| {
            (0..n_episodes)
                .into_par_iter()
                .map(|e| {
                    let mut env = self.env.clone();
                    let mut rng = stream(seed, &[purpose::ROLLOUT, iter, e as u64]);
                    rollout_episode(&mut env, strides, &l.policy, eta, &mut rng).map_err(TrainError::from)
                })
                .collect()
        })
    }

    /// Runs one iteration: rollouts, advantages, updates and stage bookkeeping.
    pub fn step(&mut self) -> Result<MetricsRow, TrainError> {
        let iteration = self.state.iteration;
        let n = episodes_per_iteration(&self.cfg, &self.env);
        let episodes = self.collect(n)?;
        let row = self.update(&episodes).map_err(|e| match e {
            TrainError::NonFinite { what, .. } => TrainError::NonFinite { what, iteration },
            other => other,
        })?;
        Ok(row)
    }

    fn update(&mut self, episodes: &[EpisodeRollout]) -> Result<MetricsRow, TrainError> {
        let cfg = &self.cfg;
        let steps = cfg.diffusion.steps;
        let train_adaptor = self.adaptive() && self.state.stages.stage != Stage::Warmup;
        let weights = cfg.adaptor.reward_weights();
        let clip = cfg.dppo.clip_schedule();
        let scale = cfg.dppo.reward_scale;
        let l = &mut self.state.learners;

        let horizon = self.env.spec().chunks_per_episode() as f64;
        let mut value_inputs: Vec<Vec<f64>> = Vec::new();
        let mut value_targets = Vec::new();
        let mut denoise = Vec::new();
        let mut stride_samples = Vec::new();
        for ep in episodes {
            let ends = ep.action_ends();
            let rewards: Vec<f64> = ends.iter().map(|&i| ep.records[i].reward * scale).collect();
            let obs: Vec<Vec<f64>> = ends
                .iter()
                .map(|&i| with_time(&ep.records[i].obs, ep.records[i].t, horizon))
                .collect();
            let values = obs.iter().map(|o| l.critic.value(o)).collect::<Result<Vec<_>, _>>()?;
            let mut dones = vec![false; ends.len()];
            if let Some(d) = dones.last_mut() {
                *d = true;
            }
            let adv = gae(&rewards, &values, &dones, 0.0, cfg.dppo.gamma_env, cfg.dppo.gae_lambda)?;
            for (t, o) in obs.into_iter().enumerate() {
                value_inputs.push(o);
                value_targets.push(adv[t] + values[t]);
            }
            for r in &ep.records {
                let j = r.next_level();
                denoise.push(DenoiseSample {
                    obs: &r.obs,
                    x: &r.x,
                    level: r.level,
                    stride: r.stride,
                    x_next: &r.x_next,
                    logp_old: r.logp_base,
                    advantage: cfg.dppo.gamma_denoise.powi(j as i32) * adv[r.t],
                    clip: dppo_clip(j, steps, clip),
                });
            }
            if !train_adaptor {
                continue;
            }
            let a_hat = env_advantage(&rewards, &values, cfg.dppo.gamma_env);
            let features: Vec<Vec<f64>> = ep
                .records
                .iter()
                .map(|r| joint_features(&r.obs, &r.x, r.level, steps))
                .collect();
            let rk: Vec<f64> = ep
                .records
                .iter()
                .map(|r| match &r.end {
                    Some(end) => adaptor_reward(a_hat[r.t], ep.result.success, end.stp, weights),
                    None => 0.0,
                })
                .collect();
            let critic_features: Vec<Vec<f64>> = features
                .iter()
                .zip(&ep.records)
                .map(|(f, r)| with_time(f, r.t, horizon))
                .collect();
            let vk = critic_features
                .iter()
                .map(|f| l.adaptor_critic.value(f))
                .collect::<Result<Vec<_>, _>>()?;
            let mut kd = vec![false; rk.len()];
            if let Some(d) = kd.last_mut() {
                *d = true;
            }
            let kadv = gae(&rk, &vk, &kd, 0.0, cfg.adaptor.gamma, cfg.adaptor.gae_lambda)?;
            for ((((f, cf), r), a), v) in features.into_iter().zip(critic_features).zip(&ep.records).zip(&kadv).zip(&vk) {
                stride_samples.push(StrideSample {
                    features: f,
                    critic_features: cf,
                    raw_k: r.raw_k,
                    logp_old: r.logp_adaptor,
                    advantage: *a,
                    target: a + v,
                });
            }
        }
        let values: Vec<ValueSample> = value_inputs
            .iter()
            .zip(&value_targets)
            .map(|(input, &target)| ValueSample { input, target })
            .collect();
        let epochs = self.state.stages.epochs();
        let mut rng = stream(cfg.run.seed, &[purpose::UPDATE, self.state.iteration as u64]);
        let base_stats = dppo_update(
            &mut l.policy,
            &mut l.critic,
            &mut l.actor_opt,
            &mut l.critic_opt,
            &denoise,
            &values,
            PpoSettings {
                epochs,
                minibatch: cfg.dppo.batch_size,
                max_grad_norm: cfg.dppo.max_grad_norm,
                value_coef: cfg.dppo.value_coef,
                entropy_coef: cfg.dppo.entropy_coef,
            },
            &mut rng,
        )?;
        let adaptor_stats = if train_adaptor {
            ppo_adaptor_update(
                &mut l.adaptor,
                &mut l.adaptor_critic,
                &mut l.adaptor_opt,
                &mut l.adaptor_critic_opt,
                &stride_samples,
                cfg.adaptor.clip,
                PpoSettings {
                    epochs,
                    minibatch: cfg.adaptor.batch_size,
                    max_grad_norm: cfg.adaptor.max_grad_norm,
                    value_coef: cfg.adaptor.value_coef,
                    entropy_coef: cfg.adaptor.entropy_coef,
                },
                &mut rng,
            )?
        } else {
            PpoStats::default()
        };
        for (net, what) in [
            (&l.policy.model.net, "base policy parameters"),
            (&l.critic.net, "critic parameters"),
            (&l.adaptor.head.mean, "adaptor parameters"),
            (&l.adaptor_critic.net, "adaptor critic parameters"),
        ] {
            if !net.is_finite() {
                return Err(TrainError::NonFinite {
                    what: what.into(),
                    iteration: self.state.iteration,
                });
            }
        }

        let n_ep = episodes.len() as f64;
        let mean_return = episodes.iter().map(|e| e.result.ret).sum::<f64>() / n_ep;
        let success_rate = episodes.iter().filter(|e| e.result.success).count() as f64 / n_ep;
        let actions: usize = episodes.iter().map(|e| e.steps_per_action.len()).sum();
        let total: usize = episodes.iter().map(|e| e.total_steps()).sum();
        let mean_nfe = total as f64 / actions.max(1) as f64;
        let env_steps: usize = episodes.iter().map(|e| e.result.steps).sum();
        self.state.env_steps += env_steps as u64;

        let row = MetricsRow {
            iter: self.state.iteration,
            env_steps: self.state.env_steps,
            mean_return,
            success_rate,
            mean_nfe_per_action: mean_nfe,
            mean_total_nfe: total as f64 / n_ep,
            actor_loss: base_stats.policy_loss,
            critic_loss: base_stats.value_loss,
            adaptor_loss: adaptor_stats.policy_loss,
            adaptor_entropy: adaptor_stats.entropy,
            stage: self.stage_label(),
        };
        debug!(
            "iter {} clip fractions base {:.3} adaptor {:.3}",
            row.iter, base_stats.clip_fraction, adaptor_stats.clip_fraction
        );

        if self.adaptive() {
            if self.state.stages.stage == Stage::Warmup {
                self.state.warmup_iterations += 1;
            }
            let it = self.state.iteration;
            if let Some(s) = self.state.stages.observe(it, mean_return, mean_nfe) {
                info!("entering {s} stage after iteration {it}");
            } else if self.state.stages.stage == Stage::Warmup
                && cfg.run.warmup_budget > 0
                && self.state.warmup_iterations >= cfg.run.warmup_budget
            {
                return Err(TrainError::WarmupStalled {
                    threshold: self.state.stages.zeta1,
                    iterations: self.state.warmup_iterations,
                    last: mean_return,
                });
            }
        }
        self.state.iteration += 1;
        Ok(row)
    }
}

/// Runs the remaining iterations, calling `on_iteration` after each one.
pub fn run_three_stage<F>(trainer: &mut Trainer, mut on_iteration: F) -> Result<Vec<MetricsRow>, TrainError>
where
    F: FnMut(&Trainer, &MetricsRow) -> Result<(), TrainError>,
{
    let mut rows = Vec::new();
    while !trainer.finished() {
        let row = trainer.step()?;
        info!(
            "iter {} [{}] return {:.2} success {:.2} nfe/action {:.2}",
            row.iter, row.stage, row.mean_return, row.success_rate, row.mean_nfe_per_action
        );
        on_iteration(trainer, &row)?;
        rows.push(row);
    }
    Ok(rows)
}
