//! Error taxonomy shared across the crate.
//!
//! Every variant maps to a process exit code so the CLI can report failures
//! uniformly: 2 for user/config mistakes, 3 for runtime/training failures,
//! 4 for data-integrity failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad file, bad value, violated precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input (out-of-range index, architecture mismatch, empty batch).
    #[error("input error: {0}")]
    Input(String),

    /// Internal invariant violation (shape mismatch between cache and params).
    #[error("internal error: {0}")]
    Internal(String),

    /// Optimizer saw a non-finite gradient.
    #[error("training diverged: non-finite gradient in tensor '{tensor}'")]
    NonFiniteGradient { tensor: &'static str },

    /// Training loop produced a non-finite loss or parameter value.
    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: usize, detail: String },

    /// Reverse-diffusion chain left the finite range.
    #[error("sampling diverged at timestep {t}")]
    SamplingDiverged { t: usize },

    /// Noise scale is exactly zero where a division is required.
    #[error("degenerate noise scale at timestep {t}")]
    DegenerateScale { t: usize },

    /// Checksum mismatch, truncated file, or malformed binary payload.
    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 user error, 3 runtime failure, 4 integrity failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 2,
            Error::Integrity(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
