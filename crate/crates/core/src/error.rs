use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the separation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("time {t} outside admissible range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("mixture is inconsistent with sources (max deviation {0:e})")]
    MixtureInconsistent(f64),

    #[error("non-finite state at step {step} of {stage}")]
    Diverged { stage: &'static str, step: usize },

    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(usize),

    #[error("non-finite loss for batch element {0}")]
    NonFiniteLoss(usize),

    #[error("signal of length {len} is shorter than one frame ({n_fft})")]
    SignalTooShort { len: usize, n_fft: usize },

    #[error("unsupported wav encoding: {0}")]
    WavEncoding(String),

    #[error("unsupported wav channel count {0} (expected mono)")]
    WavChannels(u16),

    #[error("malformed wav header: {0}")]
    WavHeader(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    CheckpointTruncated { needed: usize, found: usize },

    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for errors caused by the filesystem rather than by the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
