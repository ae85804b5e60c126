//! Crate-wide error type.
//!
//! Errors split into two families that the CLI maps onto exit codes:
//! configuration/contract problems (exit 2) and runtime/numeric problems
//! (exit 3). [`Error::is_validation`] decides the family.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing modality '{0}' in batch")]
    MissingModality(String),

    #[error("input too short: {frames} frames < {segments} segments")]
    InputTooShort { frames: usize, segments: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error("NaN gradient in parameter '{0}'")]
    NanGradient(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("parse error in {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors the user can fix by changing inputs or config.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Contract(_)
                | Error::MissingModality(_)
                | Error::InputTooShort { .. }
                | Error::LabelOutOfRange { .. }
        )
    }
}
