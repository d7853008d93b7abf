//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible shapes.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A value failed validation (bad config, bad dimensions, bad parameter).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// A gradient fed to the optimizer contained NaN or infinity.
    #[error("non-finite gradient at optimizer step {step}")]
    NonFiniteGradient { step: u64 },

    /// The approximation objective became NaN or infinite.
    #[error("approximation diverged at step {step} (rank {rank}, lr {lr}, init sigma {init_sigma}, seed {seed})")]
    Diverged {
        step: usize,
        rank: usize,
        lr: f64,
        init_sigma: f64,
        seed: u64,
    },

    /// A WTN1 byte stream was malformed.
    #[error("malformed tensor file: {0}")]
    Format(String),

    /// Stored artifact failed its integrity check.
    #[error("corrupt cache entry at {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("stale approximation: expected weight digest {expected}, found {found}")]
    StaleApproximation { expected: String, found: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True when the failure is a caller mistake rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. } | Error::Invalid(_) | Error::StaleApproximation { .. }
        )
    }
}
