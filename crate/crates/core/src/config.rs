//! Flat `section.key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::diffusion::{default_beta_range, Eta, NoiseSchedule, ScheduleKind};
use crate::envs::{Arena, EnvError, PointGateSpec, PointMassEnv, StagedSpec, Task};
use crate::train::{BcConfig, ClipSchedule, RewardWeights};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given more than once")]
    Duplicate(String),
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg: msg.into(),
    }
}

/// Text form of a single configuration value.
trait Value: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

impl Value for f64 {
    fn parse(s: &str) -> Result<Self, String> {
        f64::from_str(s).map_err(|e| format!("{e}: `{s}`"))
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl Value for usize {
    fn parse(s: &str) -> Result<Self, String> {
        usize::from_str(s).map_err(|e| format!("{e}: `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse(s: &str) -> Result<Self, String> {
        u64::from_str(s).map_err(|e| format!("{e}: `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for bool {
    fn parse(s: &str) -> Result<Self, String> {
        bool::from_str(s).map_err(|_| format!("expected true or false, got `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for Vec<usize> {
    fn parse(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| usize::parse(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl Value for ScheduleKind {
    fn parse(s: &str) -> Result<Self, String> {
        s.parse::<ScheduleKind>().map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.as_str().to_string()
    }
}

impl Value for Eta {
    fn parse(s: &str) -> Result<Self, String> {
        let v = f64::parse(s)?;
        Eta::from_value(v).ok_or_else(|| format!("eta must be 0 or 1, got {v}"))
    }
    fn render(&self) -> String {
        format!("{}", self.value())
    }
}

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl Value for $name {
            fn parse(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "expected one of {}, got `{s}`",
                        [$($text),+].join(", ")
                    )),
                }
            }
            fn render(&self) -> String {
                self.as_str().to_string()
            }
        }
    };
}

named_enum!(EnvKind { PointGate => "point_gate", Staged => "staged" });
named_enum!(RunMode { Adaptive => "adaptive", Fixed => "fixed" });
named_enum!(PredictorPreset { Desk => "desk", Paper => "paper" });

impl PredictorPreset {
    pub fn hidden(self) -> Vec<usize> {
        match self {
            PredictorPreset::Desk => vec![128, 128, 128],
            PredictorPreset::Paper => vec![256, 512, 1024, 512, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub horizon: usize,
    pub chunk_len: usize,
    pub max_speed: f64,
    pub gate_half_width: f64,
    pub wall_x: f64,
    pub wall_thickness: f64,
    pub goal_radius: f64,
    pub approach_margin: f64,
    pub collision_fails: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let a = Arena::default();
        let g = PointGateSpec::default();
        Self {
            kind: EnvKind::PointGate,
            horizon: a.horizon,
            chunk_len: a.chunk_len,
            max_speed: a.max_speed,
            gate_half_width: g.gate_half_width,
            wall_x: g.wall_x,
            wall_thickness: g.wall_thickness,
            goal_radius: g.goal_radius,
            approach_margin: g.approach_margin,
            collision_fails: g.collision_fails,
        }
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<PointMassEnv, EnvError> {
        match self.kind {
            EnvKind::PointGate => {
                let arena = Arena {
                    horizon: self.horizon,
                    chunk_len: self.chunk_len,
                    max_speed: self.max_speed,
                    ..Arena::default()
                };
                let gate = PointGateSpec {
                    wall_x: self.wall_x,
                    wall_thickness: self.wall_thickness,
                    gate_half_width: self.gate_half_width,
                    goal_radius: self.goal_radius,
                    approach_margin: self.approach_margin,
                    collision_fails: self.collision_fails,
                    ..PointGateSpec::default()
                };
                PointMassEnv::new(arena, Task::PointGate(gate))
            }
            EnvKind::Staged => {
                let base = PointMassEnv::staged();
                let arena = Arena {
                    horizon: self.horizon,
                    chunk_len: self.chunk_len,
                    max_speed: self.max_speed,
                    ..base.arena().clone()
                };
                PointMassEnv::new(arena, Task::Staged(StagedSpec::default()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta_train: Eta,
    pub eta_eval: Eta,
    pub sigma_floor: f64,
    /// Bound on the clean-chunk estimate; 0 disables it.
    pub x0_clip: f64,
    pub hidden: Vec<usize>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let (lo, hi) = default_beta_range(10);
        Self {
            steps: 10,
            schedule: ScheduleKind::Linear,
            beta_min: lo,
            beta_max: hi,
            eta_train: Eta::Stochastic,
            eta_eval: Eta::Deterministic,
            sigma_floor: 1e-4,
            x0_clip: 1.0,
            hidden: vec![128, 128],
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule, crate::diffusion::DiffusionError> {
        NoiseSchedule::build(self.steps, self.schedule, self.beta_min, self.beta_max)
    }

    pub fn x0_clip(&self) -> Option<f64> {
        (self.x0_clip > 0.0).then_some(self.x0_clip)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DppoConfig {
    pub gamma_env: f64,
    pub gamma_denoise: f64,
    pub gae_lambda: f64,
    pub clip_base: f64,
    pub clip_coef: f64,
    pub clip_rate: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub actor_lr: f64,
    pub actor_weight_decay: f64,
    pub critic_lr: f64,
    pub critic_weight_decay: f64,
    pub batch_size: usize,
    pub max_grad_norm: f64,
    /// Lower bound on the per-step std while sampling and scoring during
    /// fine-tuning.
    pub min_std: f64,
    /// Multiplier applied to environment rewards before any RL computation.
    pub reward_scale: f64,
    pub critic_hidden: Vec<usize>,
}

impl Default for DppoConfig {
    fn default() -> Self {
        Self {
            gamma_env: 0.999,
            gamma_denoise: 0.99,
            gae_lambda: 0.95,
            clip_base: 0.001,
            clip_coef: 0.01,
            clip_rate: 3.0,
            value_coef: 0.5,
            entropy_coef: 0.0,
            actor_lr: 1e-4,
            actor_weight_decay: 0.0,
            critic_lr: 1e-3,
            critic_weight_decay: 0.0,
            batch_size: 250,
            max_grad_norm: 10.0,
            min_std: 0.1,
            reward_scale: 0.05,
            critic_hidden: vec![64, 64],
        }
    }
}

impl DppoConfig {
    pub fn clip_schedule(&self) -> ClipSchedule {
        ClipSchedule {
            base: self.clip_base,
            coef: self.clip_coef,
            rate: self.clip_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_s: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub weight_decay: f64,
    pub lr: f64,
    /// `c`: warm-up stride and initial adaptor mean.
    pub init_mean: f64,
    /// `v`: initial adaptor std.
    pub init_std: f64,
    pub std_floor: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub epochs: usize,
    pub epochs_slow: usize,
    pub batch_size: usize,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.2,
            gamma_s: 0.95,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.01,
            entropy_coef: 0.01,
            value_coef: 1.0,
            weight_decay: 1e-3,
            lr: 1e-4,
            init_mean: 5.0,
            init_std: 1.0,
            std_floor: 1e-3,
            zeta1: 60.0,
            zeta2: 4.0,
            epochs: 10,
            epochs_slow: 5,
            batch_size: 1000,
            max_grad_norm: 10.0,
            hidden: vec![64, 64],
        }
    }
}

impl AdaptorConfig {
    pub fn reward_weights(&self) -> RewardWeights {
        RewardWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma_s: self.gamma_s,
        }
    }

    pub fn warmup_stride(&self) -> usize {
        self.init_mean.round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub episodes: usize,
    pub noise_std: f64,
    pub gamma: f64,
    pub update_interval: usize,
    pub update_epochs: usize,
    pub buffer_size: usize,
    pub envs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub predictor: PredictorPreset,
    /// Sum rewards from the start of the episode instead of from the
    /// perturbed step.
    pub full_sum: bool,
    pub probes: usize,
    pub probe_draws: usize,
    pub profile_episodes: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            noise_std: 0.1,
            gamma: 0.99,
            update_interval: 20,
            update_epochs: 6,
            buffer_size: 100_000,
            envs: 10,
            lr: 3e-4,
            weight_decay: 1e-4,
            batch_size: 64,
            predictor: PredictorPreset::Desk,
            full_sum: false,
            probes: 12,
            probe_draws: 100,
            profile_episodes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub iterations: usize,
    /// Environment decisions (action chunks) collected per iteration.
    pub rollout_steps: usize,
    pub mode: RunMode,
    pub fixed_stride: usize,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    /// Warm-up iterations allowed before giving up; 0 means unlimited.
    pub warmup_budget: usize,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            iterations: 0,
            rollout_steps: 400,
            mode: RunMode::Adaptive,
            fixed_stride: 1,
            checkpoint_interval: 0,
            warmup_budget: 0,
            eval_episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub env: EnvConfig,
    pub diffusion: DiffusionConfig,
    pub bc: BcConfig,
    pub dppo: DppoConfig,
    pub adaptor: AdaptorConfig,
    pub study: StudyConfig,
    pub run: RunConfig,
}

pub const REQUIRED_KEYS: [&str; 3] = ["env.kind", "run.seed", "run.iterations"];

macro_rules! keys {
    ($($key:literal => $sec:ident . $field:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$($key),*];

        fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
            match key {
                $($key => self.$sec.$field = Value::parse(value).map_err(|m| invalid(key, m))?,)*
                _ => return Err(ConfigError::UnknownKey(key.to_string())),
            }
            Ok(())
        }

        /// Every key with its current value, in canonical order.
        pub fn entries(&self) -> Vec<(&'static str, String)> {
            vec![$(($key, self.$sec.$field.render())),*]
        }
    };
}

impl Config {
    keys! {
        "env.kind" => env.kind,
        "env.horizon" => env.horizon,
        "env.chunk_len" => env.chunk_len,
        "env.max_speed" => env.max_speed,
        "env.gate_half_width" => env.gate_half_width,
        "env.wall_x" => env.wall_x,
        "env.wall_thickness" => env.wall_thickness,
        "env.goal_radius" => env.goal_radius,
        "env.approach_margin" => env.approach_margin,
        "env.collision_fails" => env.collision_fails,
        "diffusion.steps" => diffusion.steps,
        "diffusion.schedule" => diffusion.schedule,
        "diffusion.beta_min" => diffusion.beta_min,
        "diffusion.beta_max" => diffusion.beta_max,
        "diffusion.eta_train" => diffusion.eta_train,
        "diffusion.eta_eval" => diffusion.eta_eval,
        "diffusion.sigma_floor" => diffusion.sigma_floor,
        "diffusion.x0_clip" => diffusion.x0_clip,
        "diffusion.hidden" => diffusion.hidden,
        "bc.episodes" => bc.episodes,
        "bc.action_noise" => bc.action_noise,
        "bc.epochs" => bc.epochs,
        "bc.batch_size" => bc.batch_size,
        "bc.lr" => bc.lr,
        "bc.weight_decay" => bc.weight_decay,
        "dppo.gamma_env" => dppo.gamma_env,
        "dppo.gamma_denoise" => dppo.gamma_denoise,
        "dppo.gae_lambda" => dppo.gae_lambda,
        "dppo.clip_base" => dppo.clip_base,
        "dppo.clip_coef" => dppo.clip_coef,
        "dppo.clip_rate" => dppo.clip_rate,
        "dppo.value_coef" => dppo.value_coef,
        "dppo.entropy_coef" => dppo.entropy_coef,
        "dppo.actor_lr" => dppo.actor_lr,
        "dppo.actor_weight_decay" => dppo.actor_weight_decay,
        "dppo.critic_lr" => dppo.critic_lr,
        "dppo.critic_weight_decay" => dppo.critic_weight_decay,
        "dppo.batch_size" => dppo.batch_size,
        "dppo.max_grad_norm" => dppo.max_grad_norm,
        "dppo.min_std" => dppo.min_std,
        "dppo.reward_scale" => dppo.reward_scale,
        "dppo.critic_hidden" => dppo.critic_hidden,
        "adaptor.alpha" => adaptor.alpha,
        "adaptor.beta" => adaptor.beta,
        "adaptor.gamma_s" => adaptor.gamma_s,
        "adaptor.gamma" => adaptor.gamma,
        "adaptor.gae_lambda" => adaptor.gae_lambda,
        "adaptor.clip" => adaptor.clip,
        "adaptor.entropy_coef" => adaptor.entropy_coef,
        "adaptor.value_coef" => adaptor.value_coef,
        "adaptor.weight_decay" => adaptor.weight_decay,
        "adaptor.lr" => adaptor.lr,
        "adaptor.init_mean" => adaptor.init_mean,
        "adaptor.init_std" => adaptor.init_std,
        "adaptor.std_floor" => adaptor.std_floor,
        "adaptor.zeta1" => adaptor.zeta1,
        "adaptor.zeta2" => adaptor.zeta2,
        "adaptor.epochs" => adaptor.epochs,
        "adaptor.epochs_slow" => adaptor.epochs_slow,
        "adaptor.batch_size" => adaptor.batch_size,
        "adaptor.max_grad_norm" => adaptor.max_grad_norm,
        "adaptor.hidden" => adaptor.hidden,
        "study.episodes" => study.episodes,
        "study.noise_std" => study.noise_std,
        "study.gamma" => study.gamma,
        "study.update_interval" => study.update_interval,
        "study.update_epochs" => study.update_epochs,
        "study.buffer_size" => study.buffer_size,
        "study.envs" => study.envs,
        "study.lr" => study.lr,
        "study.weight_decay" => study.weight_decay,
        "study.batch_size" => study.batch_size,
        "study.predictor" => study.predictor,
        "study.full_sum" => study.full_sum,
        "study.probes" => study.probes,
        "study.probe_draws" => study.probe_draws,
        "study.profile_episodes" => study.profile_episodes,
        "run.seed" => run.seed,
        "run.workers" => run.workers,
        "run.iterations" => run.iterations,
        "run.rollout_steps" => run.rollout_steps,
        "run.mode" => run.mode,
        "run.fixed_stride" => run.fixed_stride,
        "run.checkpoint_interval" => run.checkpoint_interval,
        "run.warmup_budget" => run.warmup_budget,
        "run.eval_episodes" => run.eval_episodes,
    }

    pub fn keys() -> &'static [&'static str] {
        Self::KEYS
    }

    /// Parses and validates a configuration document.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: n + 1,
                    msg: format!("expected `section.key = value`, got `{line}`"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if !k.contains('.') {
                return Err(ConfigError::Syntax {
                    line: n + 1,
                    msg: format!("key `{k}` has no section"),
                });
            }
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate(k.to_string()));
            }
            cfg.set(k, v)?;
        }
        if let Some(k) = REQUIRED_KEYS.iter().find(|k| !seen.contains(**k)) {
            return Err(ConfigError::Missing(k.to_string()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn set_value(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set(key, value)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.env;
        positive_int("env.horizon", e.horizon)?;
        positive_int("env.chunk_len", e.chunk_len)?;
        if !e.horizon.is_multiple_of(e.chunk_len) {
            return Err(invalid("env.horizon", "must be a multiple of env.chunk_len"));
        }
        open_range("env.max_speed", e.max_speed, 0.0, 1.0)?;
        open_range("env.gate_half_width", e.gate_half_width, 0.0, 1.0)?;
        open_range("env.wall_x", e.wall_x, -1.0, 1.0)?;
        open_range("env.wall_thickness", e.wall_thickness, 0.0, 1.0)?;
        open_range("env.goal_radius", e.goal_radius, 0.0, 1.0)?;
        nonneg("env.approach_margin", e.approach_margin)?;
        e.build().map_err(|err| invalid("env", err.to_string()))?;

        let d = &self.diffusion;
        positive_int("diffusion.steps", d.steps)?;
        open_range("diffusion.beta_min", d.beta_min, 0.0, 1.0)?;
        open_range("diffusion.beta_max", d.beta_max, 0.0, 1.0)?;
        if d.beta_min > d.beta_max {
            return Err(invalid("diffusion.beta_min", "must not exceed diffusion.beta_max"));
        }
        positive("diffusion.sigma_floor", d.sigma_floor)?;
        nonneg("diffusion.x0_clip", d.x0_clip)?;
        hidden("diffusion.hidden", &d.hidden)?;

        let b = &self.bc;
        nonneg("bc.action_noise", b.action_noise)?;
        positive_int("bc.batch_size", b.batch_size)?;
        nonneg("bc.lr", b.lr)?;
        nonneg("bc.weight_decay", b.weight_decay)?;

        let p = &self.dppo;
        open_range("dppo.gamma_env", p.gamma_env, 0.0, 1.0)?;
        open_range("dppo.gamma_denoise", p.gamma_denoise, 0.0, 1.0)?;
        closed_range("dppo.gae_lambda", p.gae_lambda, 0.0, 1.0)?;
        positive("dppo.clip_base", p.clip_base)?;
        positive("dppo.clip_coef", p.clip_coef)?;
        if p.clip_base > p.clip_coef {
            return Err(invalid("dppo.clip_base", "must not exceed dppo.clip_coef"));
        }
        positive("dppo.clip_rate", p.clip_rate)?;
        nonneg("dppo.value_coef", p.value_coef)?;
        nonneg("dppo.entropy_coef", p.entropy_coef)?;
        nonneg("dppo.actor_lr", p.actor_lr)?;
        nonneg("dppo.actor_weight_decay", p.actor_weight_decay)?;
        nonneg("dppo.critic_lr", p.critic_lr)?;
        nonneg("dppo.critic_weight_decay", p.critic_weight_decay)?;
        positive_int("dppo.batch_size", p.batch_size)?;
        positive("dppo.max_grad_norm", p.max_grad_norm)?;
        nonneg("dppo.min_std", p.min_std)?;
        positive("dppo.reward_scale", p.reward_scale)?;
        hidden("dppo.critic_hidden", &p.critic_hidden)?;

        let a = &self.adaptor;
        nonneg("adaptor.alpha", a.alpha)?;
        nonneg("adaptor.beta", a.beta)?;
        open_range("adaptor.gamma_s", a.gamma_s, 0.0, 1.0)?;
        open_range("adaptor.gamma", a.gamma, 0.0, 1.0)?;
        closed_range("adaptor.gae_lambda", a.gae_lambda, 0.0, 1.0)?;
        positive("adaptor.clip", a.clip)?;
        nonneg("adaptor.entropy_coef", a.entropy_coef)?;
        nonneg("adaptor.value_coef", a.value_coef)?;
        nonneg("adaptor.weight_decay", a.weight_decay)?;
        nonneg("adaptor.lr", a.lr)?;
        closed_range("adaptor.init_mean", a.init_mean, 1.0, d.steps as f64)?;
        positive("adaptor.init_std", a.init_std)?;
        positive("adaptor.std_floor", a.std_floor)?;
        if a.init_std < a.std_floor {
            return Err(invalid("adaptor.init_std", "must be at least adaptor.std_floor"));
        }
        if a.zeta1.is_nan() {
            return Err(invalid("adaptor.zeta1", "must be a number or -inf"));
        }
        finite("adaptor.zeta2", a.zeta2)?;
        positive_int("adaptor.epochs", a.epochs)?;
        positive_int("adaptor.epochs_slow", a.epochs_slow)?;
        if a.epochs_slow > a.epochs {
            return Err(invalid("adaptor.epochs_slow", "must not exceed adaptor.epochs"));
        }
        positive_int("adaptor.batch_size", a.batch_size)?;
        positive("adaptor.max_grad_norm", a.max_grad_norm)?;
        hidden("adaptor.hidden", &a.hidden)?;

        let s = &self.study;
        nonneg("study.noise_std", s.noise_std)?;
        open_range("study.gamma", s.gamma, 0.0, 1.0)?;
        positive_int("study.update_interval", s.update_interval)?;
        positive_int("study.buffer_size", s.buffer_size)?;
        positive_int("study.envs", s.envs)?;
        nonneg("study.lr", s.lr)?;
        nonneg("study.weight_decay", s.weight_decay)?;
        positive_int("study.batch_size", s.batch_size)?;
        positive_int("study.probe_draws", s.probe_draws)?;

        let r = &self.run;
        positive_int("run.workers", r.workers)?;
        positive_int("run.rollout_steps", r.rollout_steps)?;
        if r.fixed_stride < 1 || r.fixed_stride > d.steps {
            return Err(invalid("run.fixed_stride", format!("must be in [1, {}]", d.steps)));
        }
        Ok(())
    }
}

fn finite(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be finite, got {v}")))
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    finite(key, v)?;
    if v > 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

fn nonneg(key: &str, v: f64) -> Result<(), ConfigError> {
    finite(key, v)?;
    if v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be non-negative, got {v}")))
    }
}

fn open_range(key: &str, v: f64, lo: f64, hi: f64) -> Result<(), ConfigError> {
    if v > lo && v < hi {
        Ok(())
    } else {
        Err(invalid(key, format!("must lie in ({lo}, {hi}), got {v}")))
    }
}

fn closed_range(key: &str, v: f64, lo: f64, hi: f64) -> Result<(), ConfigError> {
    if v >= lo && v <= hi {
        Ok(())
    } else {
        Err(invalid(key, format!("must lie in [{lo}, {hi}], got {v}")))
    }
}

fn positive_int(key: &str, v: usize) -> Result<(), ConfigError> {
    if v > 0 {
        Ok(())
    } else {
        Err(invalid(key, "must be at least 1"))
    }
}

fn hidden(key: &str, v: &[usize]) -> Result<(), ConfigError> {
    if v.contains(&0) {
        Err(invalid(key, "layer widths must be positive"))
    } else {
        Ok(())
    }
}
