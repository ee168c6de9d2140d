//! Deterministic evaluation with NFE accounting.

use crate::diffusion::Eta;
use crate::dyndenoise::{rollout_episode, EpisodeRollout, RolloutError};
use crate::envs::{PointMassEnv, Region};
use crate::policy::{DiffusionPolicy, StridePolicy};
use crate::rng::{purpose, stream};

/// Summary of one evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub ret: f64,
    pub success: bool,
    pub actions: usize,
    /// Denoising steps summed over the episode.
    pub total_steps: usize,
    /// Mean effective stride of decisions taken near the gate, if any.
    pub approach_stride: Option<f64>,
    pub free_stride: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EvalEpisode>,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len().max(1) as f64
    }

    pub fn mean_return(&self) -> f64 {
        self.episodes.iter().map(|e| e.ret).sum::<f64>() / self.episodes.len().max(1) as f64
    }

    pub fn mean_nfe_per_action(&self) -> f64 {
        let steps: usize = self.episodes.iter().map(|e| e.total_steps).sum();
        let actions: usize = self.episodes.iter().map(|e| e.actions).sum();
        steps as f64 / actions.max(1) as f64
    }

    pub fn step_totals(&self) -> Vec<usize> {
        self.episodes.iter().map(|e| e.total_steps).collect()
    }
}

/// Mean effective stride per region over the decisions of one episode.
/// Regions are judged from the position at the start of the chunk.
pub fn region_strides(env: &PointMassEnv, ep: &EpisodeRollout) -> (Option<f64>, Option<f64>) {
    let (mut a, mut na, mut f, mut nf) = (0.0, 0usize, 0.0, 0usize);
    for r in &ep.records {
        match env.region_at([r.obs[0], r.obs[1]]) {
            Region::Approach => {
                a += r.stride as f64;
                na += 1;
            }
            Region::FreeSpace => {
                f += r.stride as f64;
                nf += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    (mean(a, na), mean(f, nf))
}

/// Runs `episodes` episodes on the evaluation streams of `seed`; the same
/// seed gives the same start states for every stride rule.
pub fn evaluate(
    env: &PointMassEnv,
    policy: &DiffusionPolicy,
    strides: &dyn StridePolicy,
    eta: Eta,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport, RolloutError> {
    let mut out = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut env = env.clone();
        let mut rng = stream(seed, &[purpose::EVAL, e as u64]);
        let ep = rollout_episode(&mut env, strides, policy, eta, &mut rng)?;
        let (approach_stride, free_stride) = region_strides(&env, &ep);
        out.push(EvalEpisode {
            ret: ep.result.ret,
            success: ep.result.success,
            actions: ep.steps_per_action.len(),
            total_steps: ep.total_steps(),
            approach_stride,
            free_stride,
        });
    }
    Ok(EvalReport { episodes: out })
}
