//! Perturbation study of action criticality.
//!
//! The scripted expert is perturbed once per episode at a random chunk; the
//! discounted tail return that follows is regressed on the unperturbed
//! `(observation, chunk)` pair. A low predicted return marks a crucial chunk.

use std::collections::VecDeque;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::StudyConfig;
use crate::envs::{EnvError, Environment, PointMassEnv, Region, ScriptedExpert};
use crate::nn::{clip_grad_norm, layer_sizes, Activation, AdamWConfig, Mlp, NnError, OptimState};
use crate::rng::{purpose, stream};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("no episodes configured")]
    NoEpisodes,
    #[error("invalid study setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One perturbed episode, stored with the unperturbed pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub t: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub ret: f64,
}

impl PerturbationRecord {
    pub fn input(&self) -> Vec<f64> {
        [self.obs.as_slice(), self.action.as_slice()].concat()
    }
}

/// Discounted return seen from chunk `t` given every chunk reward of the
/// episode. A success still held at the horizon is treated as the absorbing
/// state it is: the reward of the last chunk continues forever.
pub fn perturbed_return(rewards: &[f64], t: usize, success: bool, gamma: f64, full_sum: bool) -> f64 {
    let from = if full_sum { 0 } else { t };
    let mut j: f64 = (from..rewards.len())
        .map(|tau| gamma.powi(tau as i32 - t as i32) * rewards[tau])
        .sum();
    if success {
        if let Some(&last) = rewards.last() {
            j += gamma.powi(rewards.len() as i32 - t as i32) * last / (1.0 - gamma);
        }
    }
    j
}

/// Runs the expert from a fresh start and perturbs the chunk issued at
/// chunk index `t_l` by `N(0, v^2 I)`. Rewards are summed per chunk.
pub fn perturbed_rollout(
    env: &mut PointMassEnv,
    expert: &mut ScriptedExpert,
    t_l: usize,
    v: f64,
    gamma: f64,
    full_sum: bool,
    rng: &mut dyn RngCore,
) -> Result<PerturbationRecord, EnvError> {
    env.reset(rng);
    expert.begin_episode(env, rng);
    perturb_from_reset(env, expert, t_l, v, gamma, full_sum, rng)
}

/// As [`perturbed_rollout`] with the start state and gate already chosen.
fn perturb_from_reset(
    env: &mut PointMassEnv,
    expert: &mut ScriptedExpert,
    t_l: usize,
    v: f64,
    gamma: f64,
    full_sum: bool,
    rng: &mut dyn RngCore,
) -> Result<PerturbationRecord, EnvError> {
    let mut rewards = Vec::new();
    let mut record = None;
    let mut t = 0;
    while !env.is_done() {
        let obs = env.observe();
        let chunk = expert.chunk(env);
        let mut exec = chunk.clone();
        if t == t_l {
            for a in &mut exec {
                let z: f64 = rng.sample(StandardNormal);
                *a += v * z;
            }
            env.spec().clamp_chunk(&mut exec);
            record = Some((obs, chunk));
        }
        rewards.push(env.step_chunk(&exec)?.reward());
        t += 1;
    }
    // an episode cut short by a collision before t_l never executes the
    // perturbed chunk; its record is the last chunk issued
    let (obs, action) = record.unwrap_or_else(|| (env.observe(), vec![0.0; env.spec().chunk_dim()]));
    let t_rec = t_l.min(rewards.len());
    let ret = perturbed_return(&rewards, t_rec, env.succeeded(), gamma, full_sum);
    Ok(PerturbationRecord {
        t: t_rec,
        obs,
        action,
        ret,
    })
}

/// `D_phi`: an MLP on the concatenated `(o, a)` with standardised targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPredictor {
    pub net: Mlp,
    pub target_mean: f64,
    pub target_std: f64,
}

impl ReturnPredictor {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Result<Self, NnError> {
        let net = Mlp::new(&layer_sizes(input, hidden, 1), Activation::Relu, Activation::Identity, rng)?;
        Ok(Self {
            net,
            target_mean: 0.0,
            target_std: 1.0,
        })
    }

    pub fn predict(&self, input: &[f64]) -> Result<f64, NnError> {
        Ok(self.net.forward(input)?[0] * self.target_std + self.target_mean)
    }

    /// Accumulates the gradient of `coef * (f(x) - y)^2` in standardised
    /// units and returns the squared error.
    pub fn squared_error_grad(&self, input: &[f64], target: f64, coef: f64, grads: &mut [f64]) -> Result<f64, NnError> {
        let tape = self.net.forward_tape(input)?;
        let diff = tape.output()[0] - (target - self.target_mean) / self.target_std;
        self.net.backward(&tape, &[2.0 * coef * diff], grads)?;
        Ok(diff * diff)
    }

    /// Fixes the target standardisation from a dataset.
    pub fn fit_scale(&mut self, records: &[&PerturbationRecord]) {
        if records.is_empty() {
            return;
        }
        let n = records.len() as f64;
        let mean = records.iter().map(|r| r.ret).sum::<f64>() / n;
        let var = records.iter().map(|r| (r.ret - mean).powi(2)).sum::<f64>() / n;
        self.target_mean = mean;
        self.target_std = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
}

/// FIFO record buffer capped at `capacity`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordBuffer {
    records: VecDeque<PerturbationRecord>,
    capacity: usize,
}

impl RecordBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            records: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, r: PerturbationRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PerturbationRecord> {
        self.records.iter()
    }
}

/// `epochs` passes of minibatch AdamW over `records`; returns the mean
/// standardised squared error of each epoch.
pub fn train_epochs(
    predictor: &mut ReturnPredictor,
    opt: &mut OptimState,
    records: &[&PerturbationRecord],
    epochs: usize,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>, StudyError> {
    let inputs: Vec<Vec<f64>> = records.iter().map(|r| r.input()).collect();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size.max(1)) {
            let mut grads = predictor.net.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                total += predictor.squared_error_grad(&inputs[i], records[i].ret, scale, &mut grads)?;
            }
            clip_grad_norm(&mut [&mut grads], 10.0);
            opt.step(predictor.net.params_mut(), &grads)?;
        }
        history.push(total / records.len().max(1) as f64);
    }
    Ok(history)
}

/// Offline regression on a fixed dataset, scale fitted first.
pub fn train_return_predictor(
    records: &[PerturbationRecord],
    cfg: &StudyConfig,
    rng: &mut dyn RngCore,
) -> Result<(ReturnPredictor, Vec<f64>), StudyError> {
    let first = records.first().ok_or(StudyError::NoEpisodes)?;
    let mut predictor = ReturnPredictor::new(first.input().len(), &cfg.predictor.hidden(), rng)?;
    let refs: Vec<&PerturbationRecord> = records.iter().collect();
    predictor.fit_scale(&refs);
    let mut opt = OptimState::new(predictor.net.num_params(), AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let losses = train_epochs(&mut predictor, &mut opt, &refs, cfg.update_epochs, cfg.batch_size, rng)?;
    Ok((predictor, losses))
}

/// Result of the interleaved collect-and-fit loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRun {
    pub predictor: ReturnPredictor,
    pub buffer: RecordBuffer,
    /// `(episodes collected, mean loss of the last epoch)` per update.
    pub losses: Vec<(usize, f64)>,
}

/// Collects `L` perturbed episodes, `envs` at a time, refitting the
/// predictor every `update_interval` episodes.
pub fn run_study(env: &PointMassEnv, cfg: &StudyConfig, seed: u64) -> Result<StudyRun, StudyError> {
    if cfg.episodes == 0 {
        return Err(StudyError::NoEpisodes);
    }
    let chunks = env.spec().chunks_per_episode();
    let input = env.spec().obs_dim + env.spec().chunk_dim();
    let mut init = stream(seed, &[purpose::STUDY, 0]);
    let mut predictor = ReturnPredictor::new(input, &cfg.predictor.hidden(), &mut init)?;
    let mut opt = OptimState::new(predictor.net.num_params(), AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let mut buffer = RecordBuffer::new(cfg.buffer_size);
    let mut losses = Vec::new();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.envs)
        .build()
        .map_err(|e| StudyError::Invalid(format!("cannot start {} workers: {e}", cfg.envs)))?;
    // a fixed scale keeps targets stationary while the buffer fills
    predictor.target_std = env.spec().chunk_len as f64 / (1.0 - cfg.gamma);
    let mut done = 0;
    while done < cfg.episodes {
        let n = cfg.envs.min(cfg.episodes - done);
        let batch: Vec<PerturbationRecord> = pool.install(|| {
            (done..done + n)
                .into_par_iter()
                .map(|l| {
                    let mut env = env.clone();
                    let mut expert = ScriptedExpert::default();
                    let mut rng = stream(seed, &[purpose::STUDY, 1, l as u64]);
                    let t_l = rng.random_range(0..chunks);
                    perturbed_rollout(&mut env, &mut expert, t_l, cfg.noise_std, cfg.gamma, cfg.full_sum, &mut rng)
                })
                .collect::<Result<_, _>>()
        })?;
        let before = done;
        done += n;
        for r in batch {
            buffer.push(r);
        }
        if done / cfg.update_interval > before / cfg.update_interval || done == cfg.episodes {
            let refs: Vec<&PerturbationRecord> = buffer.iter().collect();
            let mut rng = stream(seed, &[purpose::STUDY, 2, done as u64]);
            let h = train_epochs(&mut predictor, &mut opt, &refs, cfg.update_epochs, cfg.batch_size, &mut rng)?;
            let last = h.last().copied().unwrap_or(f64::NAN);
            losses.push((done, last));
            if losses.len() % 10 == 0 {
                info!("criticality: {done} episodes, predictor loss {last:.4}");
            }
        }
    }
    Ok(StudyRun {
        predictor,
        buffer,
        losses,
    })
}

/// One expert episode with its start state and gate, replayable.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEpisode {
    pub start: [f64; 2],
    pub gate: usize,
    pub obs: Vec<Vec<f64>>,
    pub chunks: Vec<Vec<f64>>,
    pub regions: Vec<Region>,
    /// Index of the first chunk that ends with the task solved.
    pub first_success: Option<usize>,
}

pub fn expert_episode(env: &PointMassEnv, rng: &mut dyn RngCore) -> Result<ExpertEpisode, EnvError> {
    let mut env = env.clone();
    let mut expert = ScriptedExpert::default();
    env.reset(rng);
    let start = env.position();
    expert.begin_episode(&env, rng);
    let mut ep = ExpertEpisode {
        start,
        gate: expert.gate(),
        obs: Vec::new(),
        chunks: Vec::new(),
        regions: Vec::new(),
        first_success: None,
    };
    while !env.is_done() {
        ep.obs.push(env.observe());
        ep.regions.push(env.region());
        let chunk = expert.chunk(&env);
        let out = env.step_chunk(&chunk)?;
        ep.chunks.push(chunk);
        if out.success && ep.first_success.is_none() {
            ep.first_success = Some(ep.chunks.len() - 1);
        }
    }
    Ok(ep)
}

/// Prediction of `D_phi` at every chunk of the episode.
pub fn criticality_profile(predictor: &ReturnPredictor, ep: &ExpertEpisode) -> Result<Vec<f64>, NnError> {
    ep.obs
        .iter()
        .zip(&ep.chunks)
        .map(|(o, a)| predictor.predict(&[o.as_slice(), a.as_slice()].concat()))
        .collect()
}

/// Monte-Carlo mean of the perturbed return at chunk `t` of `ep`.
pub fn monte_carlo_return(
    env: &PointMassEnv,
    ep: &ExpertEpisode,
    t: usize,
    cfg: &StudyConfig,
    draws: usize,
    seed: u64,
) -> Result<f64, EnvError> {
    let mut total = 0.0;
    for d in 0..draws {
        let mut env = env.clone();
        env.reset_to(ep.start);
        let mut expert = ScriptedExpert::default();
        expert.begin_episode_with_gate(ep.gate);
        let mut rng = stream(seed, &[purpose::STUDY, 3, t as u64, d as u64]);
        total += perturb_from_reset(&mut env, &mut expert, t, cfg.noise_std, cfg.gamma, cfg.full_sum, &mut rng)?.ret;
    }
    Ok(total / draws.max(1) as f64)
}

/// `count` chunk indices spread evenly from the start of the episode to one
/// chunk past the first success (or over the whole episode).
pub fn probe_times(ep: &ExpertEpisode, count: usize) -> Vec<usize> {
    let len = ep.chunks.len();
    let last = ep.first_success.map_or(len, |s| (s + 2).min(len)).max(1) - 1;
    if count <= 1 || last == 0 {
        return vec![0; count.min(1)];
    }
    let mut out: Vec<usize> = (0..count)
        .map(|i| ((i as f64 * last as f64) / (count - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Coarse phase of a PointGate expert episode, for window comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Free space before the wall.
    Start,
    Approach,
    /// Past the wall, not yet solved.
    Transit,
    Solved,
}

impl Window {
    pub fn as_str(self) -> &'static str {
        match self {
            Window::Start => "start",
            Window::Approach => "approach",
            Window::Transit => "transit",
            Window::Solved => "solved",
        }
    }
}

pub fn windows(ep: &ExpertEpisode) -> Vec<Window> {
    let mut seen_approach = false;
    ep.regions
        .iter()
        .enumerate()
        .map(|(t, &r)| {
            if ep.first_success.is_some_and(|s| t > s) {
                Window::Solved
            } else if r == Region::Approach {
                seen_approach = true;
                Window::Approach
            } else if seen_approach {
                Window::Transit
            } else {
                Window::Start
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub t: usize,
    pub predicted_return: f64,
    pub mc_return: f64,
    pub window: &'static str,
}

/// Everything the study reports.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub profile: Vec<f64>,
    pub profile_windows: Vec<Window>,
    pub probes: Vec<Probe>,
    pub spearman: f64,
    /// Mean prediction per window over `profile_episodes` expert episodes.
    pub window_means: Vec<(Window, f64)>,
    pub losses: Vec<(usize, f64)>,
}

impl StudyReport {
    pub fn window_mean(&self, w: Window) -> Option<f64> {
        self.window_means.iter().find(|(x, _)| *x == w).map(|&(_, m)| m)
    }

    /// The approach window has the lowest mean prediction of all windows.
    pub fn approach_is_minimum(&self) -> bool {
        let Some(a) = self.window_mean(Window::Approach) else {
            return false;
        };
        self.window_means.iter().all(|&(w, m)| w == Window::Approach || a < m)
    }

    /// The solved window has the highest mean prediction of all windows.
    pub fn solved_is_maximum(&self) -> bool {
        let Some(s) = self.window_mean(Window::Solved) else {
            return false;
        };
        self.window_means.iter().all(|&(w, m)| w == Window::Solved || s > m)
    }
}

/// Full pipeline: collect and fit, profile one expert episode, probe it
/// against Monte-Carlo ground truth and average window means over several.
pub fn study(env: &PointMassEnv, cfg: &StudyConfig, seed: u64) -> Result<(StudyRun, StudyReport), StudyError> {
    let run = run_study(env, cfg, seed)?;
    let mut rng = stream(seed, &[purpose::STUDY, 4]);
    let ep = expert_episode(env, &mut rng)?;
    let profile = criticality_profile(&run.predictor, &ep)?;
    let times = probe_times(&ep, cfg.probes);
    let wins = windows(&ep);
    let mc: Vec<f64> = times
        .par_iter()
        .map(|&t| monte_carlo_return(env, &ep, t, cfg, cfg.probe_draws, seed))
        .collect::<Result<_, _>>()?;
    let probes: Vec<Probe> = times
        .iter()
        .zip(&mc)
        .map(|(&t, &m)| Probe {
            t,
            predicted_return: profile[t],
            mc_return: m,
            window: wins[t].as_str(),
        })
        .collect();
    let pred: Vec<f64> = probes.iter().map(|p| p.predicted_return).collect();
    let rho = spearman(&pred, &mc);

    let mut sums: Vec<(Window, f64, usize)> = Vec::new();
    for e in 0..cfg.profile_episodes {
        let mut rng = stream(seed, &[purpose::STUDY, 5, e as u64]);
        let ep = expert_episode(env, &mut rng)?;
        let prof = criticality_profile(&run.predictor, &ep)?;
        for (w, p) in windows(&ep).into_iter().zip(prof) {
            match sums.iter_mut().find(|(x, _, _)| *x == w) {
                Some(s) => {
                    s.1 += p;
                    s.2 += 1;
                }
                None => sums.push((w, p, 1)),
            }
        }
    }
    sums.sort_by_key(|s| s.0 as u8);
    let window_means = sums.into_iter().map(|(w, s, n)| (w, s / n as f64)).collect();
    let report = StudyReport {
        profile,
        profile_windows: wins,
        probes,
        spearman: rho,
        window_means,
        losses: run.losses.clone(),
    };
    Ok((run, report))
}
