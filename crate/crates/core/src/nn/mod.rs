//! Small differentiable building blocks: dense networks with manual
//! reverse-mode gradients, diagonal Gaussian heads and AdamW.

mod gaussian;
mod gradcheck;
mod mlp;
mod optim;

pub use gaussian::{gaussian_log_prob, GaussianHead, HeadGrads};
pub use gradcheck::{gradient_check, GRAD_SCALE_FLOOR};
pub use mlp::{Activation, LayerShape, Mlp, Tape};
pub use optim::{clip_grad_norm, AdamWConfig, OptimState};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid network shape: {0}")]
    InvalidShape(String),
    #[error("standard deviation must be positive, got {0}")]
    InvalidStd(f64),
    #[error("non-finite gradient at flat index {index}: {value}")]
    NonFiniteGradient { index: usize, value: f64 },
    #[error("usage error: {0}")]
    Usage(String),
}

/// Hidden widths used when a network size is not configured explicitly.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// Builds `[input, hidden..., output]` size lists.
pub fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}
