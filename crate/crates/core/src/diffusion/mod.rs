//! Noise schedules, the DDPM objective and variable-stride DDIM transitions.

mod model;
mod schedule;

pub use model::{corrupt, ddpm_loss, level_features, EpsilonModel, NoisePredictor, LEVEL_FEATURES};
pub use schedule::{
    default_beta_range, DenoiseState, Eta, NoiseSchedule, ScheduleKind, StrideCoefficients,
    DEFAULT_BETA_CAP,
};

use thiserror::Error;

use crate::nn::NnError;

/// Std used in place of a vanishing DDIM sigma when scoring stochastic steps.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("stride {stride} is not valid from level {level}")]
    InvalidStride { level: usize, stride: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}
