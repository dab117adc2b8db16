//! driftguard: a 2D conditional diffusion testbed for measuring — and
//! bounding — distributional drift during few-shot personalization.
//!
//! The library trains a small conditional denoiser from scratch on a Gaussian
//! mixture, personalizes it to a new class under three objectives (plain
//! denoising, prior preservation, Lipschitz parameter-distance regularization),
//! and quantifies how far each personalized model drifts from its teacher.

pub mod checkpoint;
pub mod config;
pub mod csvfmt;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod runs;
pub mod trainer;

pub use error::{Error, Result};
