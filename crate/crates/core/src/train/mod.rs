//! Behaviour cloning, DPPO fine-tuning, stride-adaptor PPO and the staged
//! training loop.

mod advantage;
mod bc;
mod ppo;
mod runner;
mod stage;

pub use advantage::{
    acceleration_ratio, adaptor_reward, discounted_returns, dppo_clip, env_advantage, gae, normalize, ClipSchedule,
    RewardWeights,
};
pub use bc::{collect_demonstrations, pretrain, BcConfig, Demonstrations};
pub use ppo::{
    clipped_surrogate, dppo_update, ppo_adaptor_update, DenoiseSample, PpoSettings, PpoStats, StrideSample, ValueNet,
    ValueSample,
};
pub use runner::{
    episodes_per_iteration, init_state, pretrain_base, run_three_stage, stage_controller, with_time, Learners, MetricsRow,
    TrainState,
    Trainer,
};
pub use stage::{Stage, StageController};

use thiserror::Error;

use crate::diffusion::DiffusionError;
use crate::dyndenoise::RolloutError;
use crate::envs::EnvError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: usize },
    #[error("warm-up did not reach the return threshold {threshold} within {iterations} iterations (last mean return {last})")]
    WarmupStalled {
        threshold: f64,
        iterations: usize,
        last: f64,
    },
}
