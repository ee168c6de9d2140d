//! Dynamic-stride denoising for diffusion policies.
//!
//! A base noise-prediction policy and a stride adaptor are trained together
//! inside a two-layer decision process whose inner steps are DDIM updates and
//! whose outer steps are environment transitions.

pub mod checkpoint;
pub mod config;
pub mod criticality;
pub mod diffusion;
pub mod dyndenoise;
pub mod envs;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod train;
