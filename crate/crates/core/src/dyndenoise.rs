//! The two-layer decision process: denoising decisions nested inside
//! environment steps.

use rand::RngCore;

use crate::diffusion::{DiffusionError, Eta};
use crate::envs::{ChunkOutcome, EnvError, EpisodeResult, Environment};
use crate::nn::NnError;
use crate::policy::{DiffusionPolicy, StridePolicy};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RolloutError {
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Joint index of the decision taken at level `i` (in `0..n`, i.e. one below
/// the level the chunk is at) during environment step `t`.
pub fn joint_time_index(t: usize, i: usize, n: usize) -> usize {
    assert!(i < n, "level index {i} must be below N={n}");
    t * n + (n - i - 1)
}

/// Raw sample and the stride it resolves to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrideDecision {
    pub raw: f64,
    pub stride: usize,
    pub next_level: usize,
}

impl StrideDecision {
    /// Clamps `raw` into `[0.5, N + 0.5]`, floors it and keeps the effective
    /// stride within `[1, level]`.
    pub fn resolve(raw: f64, level: usize, steps: usize) -> Self {
        debug_assert!(level >= 1 && level <= steps);
        let k = if raw.is_nan() {
            1.0
        } else {
            raw.clamp(0.5, steps as f64 + 0.5).floor()
        };
        let stride = (k as usize).clamp(1, level);
        Self {
            raw,
            stride,
            next_level: level - stride,
        }
    }
}

/// Environment step `t`, current noisy chunk and its level.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub obs: Vec<f64>,
    pub x: Vec<f64>,
    pub level: usize,
    pub t: usize,
    pub stp: usize,
}

impl JointState {
    pub fn reset<E: Environment + ?Sized>(
        env: &mut E,
        policy: &DiffusionPolicy,
        rng: &mut dyn RngCore,
    ) -> Self {
        let obs = env.reset(rng);
        Self {
            obs,
            x: policy.initial_chunk(rng),
            level: policy.steps(),
            t: 0,
            stp: 0,
        }
    }
}

/// Filled in on the decision that completes an action chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionEnd {
    /// Chunk actually executed (clamped into the action box).
    pub executed: Vec<f64>,
    /// Reward of every primitive step of the chunk.
    pub rewards: Vec<f64>,
    pub success_flags: Vec<bool>,
    pub stp: usize,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub obs: Vec<f64>,
    pub x: Vec<f64>,
    pub level: usize,
    pub t: usize,
    pub raw_k: f64,
    pub stride: usize,
    pub x_next: Vec<f64>,
    pub logp_adaptor: f64,
    pub logp_base: f64,
    /// Zero while the chunk is still noisy; the chunk reward otherwise.
    pub reward: f64,
    pub end: Option<ActionEnd>,
}

impl TransitionRecord {
    pub fn next_level(&self) -> usize {
        self.level - self.stride
    }
}

/// One denoising decision; steps the environment when the chunk is clean.
pub fn joint_step<E: Environment + ?Sized>(
    env: &mut E,
    state: &mut JointState,
    adaptor: &dyn StridePolicy,
    policy: &DiffusionPolicy,
    eta: Eta,
    rng: &mut dyn RngCore,
) -> Result<TransitionRecord, RolloutError> {
    if env.is_done() {
        return Err(EnvError::Terminated.into());
    }
    let n = policy.steps();
    let (raw, logp_adaptor) = adaptor.sample_raw(&state.obs, &state.x, state.level, rng)?;
    let decision = StrideDecision::resolve(raw, state.level, n);
    let (next, logp_base) = policy.denoise(&state.obs, &state.x, state.level, decision.stride, eta, rng)?;
    state.stp += 1;
    let mut rec = TransitionRecord {
        obs: state.obs.clone(),
        x: std::mem::take(&mut state.x),
        level: state.level,
        t: state.t,
        raw_k: raw,
        stride: decision.stride,
        x_next: next.x.clone(),
        logp_adaptor,
        logp_base,
        reward: 0.0,
        end: None,
    };
    if next.level > 0 {
        state.x = next.x;
        state.level = next.level;
        return Ok(rec);
    }
    let mut executed = next.x;
    env.spec().clamp_chunk(&mut executed);
    let out = env.step_chunk(&executed)?;
    rec.reward = out.reward();
    rec.end = Some(ActionEnd {
        executed,
        rewards: out.rewards.clone(),
        success_flags: env.last_success_flags().to_vec(),
        stp: state.stp,
        done: out.done,
        success: out.success,
    });
    state.obs = out.obs;
    state.x = policy.initial_chunk(rng);
    state.level = n;
    state.t += 1;
    state.stp = 0;
    Ok(rec)
}

/// Everything produced by one episode of the joint process.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeRollout {
    pub records: Vec<TransitionRecord>,
    pub result: EpisodeResult,
    /// Noise-network evaluations performed during the episode.
    pub nfe: usize,
    /// Denoising steps spent on each action chunk.
    pub steps_per_action: Vec<usize>,
}

impl EpisodeRollout {
    pub fn total_steps(&self) -> usize {
        self.steps_per_action.iter().sum()
    }

    pub fn mean_nfe_per_action(&self) -> f64 {
        if self.steps_per_action.is_empty() {
            0.0
        } else {
            self.total_steps() as f64 / self.steps_per_action.len() as f64
        }
    }

    /// Indices into `records` of the decisions that completed each action.
    pub fn action_ends(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.end.is_some())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Runs one episode until the environment terminates.
pub fn rollout_episode<E: Environment + ?Sized>(
    env: &mut E,
    adaptor: &dyn StridePolicy,
    policy: &DiffusionPolicy,
    eta: Eta,
    rng: &mut dyn RngCore,
) -> Result<EpisodeRollout, RolloutError> {
    let mut state = JointState::reset(env, policy, rng);
    let mut out = EpisodeRollout::default();
    while !env.is_done() {
        let rec = joint_step(env, &mut state, adaptor, policy, eta, rng)?;
        out.nfe += 1;
        if let Some(end) = &rec.end {
            out.steps_per_action.push(end.stp);
            let chunk = ChunkOutcome {
                obs: state.obs.clone(),
                rewards: end.rewards.clone(),
                done: end.done,
                success: end.success,
            };
            out.result.push(&chunk, &end.success_flags);
        }
        out.records.push(rec);
    }
    Ok(out)
}
