//! Binary checkpoints of a fine-tuning run.
//!
//! Layout, all integers little-endian: the 8-byte magic, a `u32` format
//! version, then length-prefixed sections (config text, RNG record, run
//! counters, named networks, optimizer states). Networks are stored as a
//! shape descriptor followed by the raw `f64` parameter array.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::diffusion::EpsilonModel;
use crate::envs::Environment;
use crate::nn::{Activation, AdamWConfig, GaussianHead, LayerShape, Mlp, OptimState};
use crate::policy::{DiffusionPolicy, StrideAdaptor};
use crate::rng::RNG_TAG;
use crate::train::{stage_controller, Learners, Stage, TrainState, ValueNet};

pub const MAGIC: &[u8; 8] = b"D3PCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint was written with RNG `{0}`, this build uses `{RNG_TAG}`")]
    Rng(String),
    #[error("checkpoint config is invalid: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

/// A run as stored on disk: its configuration and the state after
/// `state.iteration` completed iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub state: TrainState,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn mlp(&mut self, name: &str, net: &Mlp) {
        self.str(name);
        self.u32(net.shapes().len() as u32);
        for s in net.shapes() {
            self.u64(s.inputs as u64);
            self.u64(s.outputs as u64);
            self.u8(s.activation.tag());
        }
        self.f64s(net.params());
    }
    fn optim(&mut self, name: &str, o: &OptimState) {
        self.str(name);
        let c = o.config;
        for v in [c.lr, c.weight_decay, c.beta1, c.beta2, c.eps] {
            self.f64(v);
        }
        self.u64(o.step);
        self.f64s(&o.m);
        self.f64s(&o.v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflows usize"))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, width: usize) -> Result<usize, CheckpointError> {
        let n = self.usize()?;
        if n.saturating_mul(width) > self.buf.len() - self.pos {
            return Err(corrupt(format!("length {n} runs past the end of the file")));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("section is not UTF-8"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn expect_name(&mut self, name: &str) -> Result<(), CheckpointError> {
        let got = self.str()?;
        if got != name {
            return Err(corrupt(format!("expected block `{name}`, found `{got}`")));
        }
        Ok(())
    }
    fn mlp(&mut self, name: &str) -> Result<Mlp, CheckpointError> {
        self.expect_name(name)?;
        let layers = self.u32()? as usize;
        if layers.saturating_mul(17) > self.buf.len() - self.pos {
            return Err(corrupt(format!("`{name}` claims {layers} layers")));
        }
        let mut shapes = Vec::with_capacity(layers);
        for _ in 0..layers {
            let inputs = self.usize()?;
            let outputs = self.usize()?;
            let tag = self.u8()?;
            let activation = Activation::from_tag(tag).ok_or_else(|| corrupt(format!("activation tag {tag}")))?;
            shapes.push(LayerShape {
                inputs,
                outputs,
                activation,
            });
        }
        let params = self.f64s()?;
        Mlp::from_parts(shapes, params).map_err(|e| corrupt(format!("`{name}`: {e}")))
    }
    fn optim(&mut self, name: &str, num_params: usize) -> Result<OptimState, CheckpointError> {
        self.expect_name(name)?;
        let config = AdamWConfig {
            lr: self.f64()?,
            weight_decay: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
        };
        let step = self.u64()?;
        let m = self.f64s()?;
        let v = self.f64s()?;
        if m.len() != num_params || v.len() != num_params {
            return Err(corrupt(format!("`{name}` does not match its network")));
        }
        Ok(OptimState { config, step, m, v })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_text());
        w.str(RNG_TAG);
        w.u64(self.config.run.seed);

        let s = &self.state;
        w.u8(s.stages.stage.code());
        w.u64(s.iteration as u64);
        w.u64(s.env_steps);
        w.u64(s.warmup_iterations as u64);
        w.u64(s.stages.transitions.len() as u64);
        for &(it, stage) in &s.stages.transitions {
            w.u64(it as u64);
            w.u8(stage.code());
        }

        let l = &s.learners;
        w.mlp("epsilon", &l.policy.model.net);
        w.f64(l.policy.sigma_floor);
        w.mlp("critic", &l.critic.net);
        w.mlp("adaptor", &l.adaptor.head.mean);
        w.f64s(&l.adaptor.head.log_std);
        w.f64(l.adaptor.head.std_floor);
        w.mlp("adaptor_critic", &l.adaptor_critic.net);
        w.optim("actor_opt", &l.actor_opt);
        w.optim("critic_opt", &l.critic_opt);
        w.optim("adaptor_opt", &l.adaptor_opt);
        w.optim("adaptor_critic_opt", &l.adaptor_critic_opt);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        r.pos = MAGIC.len();
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config = Config::parse(&r.str()?)?;
        let tag = r.str()?;
        if tag != RNG_TAG {
            return Err(CheckpointError::Rng(tag));
        }
        if r.u64()? != config.run.seed {
            return Err(corrupt("seed record disagrees with the config snapshot"));
        }

        let stage_of = |c: u8| Stage::from_code(c).ok_or_else(|| corrupt(format!("stage code {c}")));
        let mut stages = stage_controller(&config);
        stages.stage = stage_of(r.u8()?)?;
        let iteration = r.usize()?;
        let env_steps = r.u64()?;
        let warmup_iterations = r.usize()?;
        let n = r.len(9)?;
        stages.transitions = (0..n)
            .map(|_| Ok((r.usize()?, stage_of(r.u8()?)?)))
            .collect::<Result<_, CheckpointError>>()?;

        let env = config.env.build().map_err(|e| corrupt(format!("environment: {e}")))?;
        let (obs_dim, chunk_dim) = (env.spec().obs_dim, env.spec().chunk_dim());
        let steps = config.diffusion.steps;
        let model = EpsilonModel::from_net(r.mlp("epsilon")?, obs_dim, chunk_dim, steps)
            .map_err(|e| corrupt(format!("`epsilon`: {e}")))?;
        let schedule = config.diffusion.schedule().map_err(|e| corrupt(e.to_string()))?;
        let sigma_floor = r.f64()?;
        let policy = DiffusionPolicy::new(model, schedule, sigma_floor)
            .map_err(|e| corrupt(e.to_string()))?
            .with_x0_clip(config.diffusion.x0_clip());
        let critic = ValueNet { net: r.mlp("critic")? };
        let mean = r.mlp("adaptor")?;
        let log_std = r.f64s()?;
        let std_floor = r.f64()?;
        let mut head = GaussianHead::new(mean, std_floor + 1.0, std_floor).map_err(|e| corrupt(format!("`adaptor`: {e}")))?;
        if log_std.len() != head.log_std.len() {
            return Err(corrupt("adaptor log-std has the wrong length"));
        }
        head.log_std = log_std;
        let adaptor = StrideAdaptor { head, steps };
        let adaptor_critic = ValueNet {
            net: r.mlp("adaptor_critic")?,
        };
        let actor_opt = r.optim("actor_opt", policy.model.net.num_params())?;
        let critic_opt = r.optim("critic_opt", critic.net.num_params())?;
        let adaptor_opt = r.optim("adaptor_opt", adaptor.head.num_params())?;
        let adaptor_critic_opt = r.optim("adaptor_critic_opt", adaptor_critic.net.num_params())?;
        if r.pos != buf.len() {
            return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }

        let learners = Learners {
            policy,
            critic,
            adaptor,
            adaptor_critic,
            actor_opt,
            critic_opt,
            adaptor_opt,
            adaptor_critic_opt,
        };
        Ok(Self {
            config,
            state: TrainState {
                learners,
                stages,
                iteration,
                env_steps,
                warmup_iterations,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
