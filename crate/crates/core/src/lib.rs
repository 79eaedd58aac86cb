//! Diffusion action-chunk sampling with partial-denoising reuse.

pub mod bench;
pub mod denoiser;
pub mod envs;
pub mod error;
pub mod falcon;
pub mod rng;
pub mod samplers;
pub mod schedule;

pub use error::{Error, Result};
