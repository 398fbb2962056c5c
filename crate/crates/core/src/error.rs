use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("gradient norm {value} at index {index} lies outside [0, 1]")]
    GradientNormOutOfRange { index: usize, value: f64 },

    #[error("length mismatch: {left} has {left_len} entries, {right} has {right_len}")]
    LengthMismatch {
        left: &'static str,
        left_len: usize,
        right: &'static str,
        right_len: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("loss {loss} is not supported in harmonizer mode {mode}")]
    ModeMismatch { loss: &'static str, mode: &'static str },

    #[error("feature dimension mismatch: model expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("impossible scene geometry: {0}")]
    Geometry(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss:e}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("no normal scenes available for NFPs")]
    NoNormalScenes,

    #[error("fold count {folds} is invalid for {scenes} scenes")]
    InvalidFolds { folds: usize, scenes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("refusing to overwrite existing output {0} (pass --force)")]
    OutputExists(PathBuf),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("parse error in {file} line {line}: {reason}")]
    Parse {
        file: String,
        line: usize,
        reason: String,
    },

    #[error("cannot aggregate rows from different configs ({0} vs {1})")]
    MixedConfig(String, String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(reason: impl Into<String>) -> Self {
        Error::Config(reason.into())
    }
}
