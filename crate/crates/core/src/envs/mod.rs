//! Point-mass tasks with sparse rewards and a scripted chunking expert.

mod expert;
mod point;

pub use expert::ScriptedExpert;
pub use point::{Arena, PointGateSpec, PointMassEnv, Region, StagedSpec, Task};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("chunk has {actual} entries, expected {expected}")]
    ChunkSize { expected: usize, actual: usize },
    #[error("episode already terminated")]
    Terminated,
    #[error("invalid environment geometry: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardConvention {
    /// 0 before the first success, 1 on every step from then on.
    RobomimicSparse,
    /// +1 on each in-order waypoint completion.
    Staged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub chunk_len: usize,
    pub horizon: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub reward: RewardConvention,
}

impl EnvSpec {
    pub fn chunk_dim(&self) -> usize {
        self.chunk_len * self.act_dim
    }

    pub fn chunks_per_episode(&self) -> usize {
        self.horizon / self.chunk_len
    }

    /// Clamps a flattened chunk into the action box.
    pub fn clamp_chunk(&self, chunk: &mut [f64]) {
        for (idx, v) in chunk.iter_mut().enumerate() {
            let d = idx % self.act_dim;
            *v = v.clamp(self.action_low[d], self.action_high[d]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkOutcome {
    pub obs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Task success as of the end of the chunk.
    pub success: bool,
}

impl ChunkOutcome {
    pub fn reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Per-episode bookkeeping shared by every rollout driver.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeResult {
    pub chunk_rewards: Vec<f64>,
    pub step_rewards: Vec<f64>,
    pub success_flags: Vec<bool>,
    pub ret: f64,
    pub steps: usize,
    pub success: bool,
}

impl EpisodeResult {
    pub fn push(&mut self, out: &ChunkOutcome, flags: &[bool]) {
        self.chunk_rewards.push(out.reward());
        self.step_rewards.extend_from_slice(&out.rewards);
        self.success_flags.extend_from_slice(flags);
        self.ret += out.reward();
        self.steps += out.rewards.len();
        self.success = out.success;
    }

    pub fn first_success(&self) -> Option<usize> {
        self.success_flags.iter().position(|&s| s)
    }
}

/// A chunk-stepped environment.
pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step_chunk(&mut self, chunk: &[f64]) -> Result<ChunkOutcome, EnvError>;
    fn observe(&self) -> Vec<f64>;
    /// Primitive steps executed so far in the episode.
    fn time(&self) -> usize;
    fn is_done(&self) -> bool;
    fn succeeded(&self) -> bool;
    /// Success flag of every primitive step of the last chunk.
    fn last_success_flags(&self) -> &[bool];
    /// Full internal state, for equality checks.
    fn state_vector(&self) -> Vec<f64>;
}
