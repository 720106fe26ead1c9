//! Few-step class-conditional generation in a spherical latent space.
//!
//! Latents are projected to unit root-mean-square norm, a noise-unaware
//! denoiser learns to map noisy spherical latents back to clean ones, and
//! sampling alternates denoising with re-spherification and decaying
//! re-noising before a single decode.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod sampler;
pub mod sphere;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
