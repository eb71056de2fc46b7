//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("backward requires a scalar root, got shape {shape}")]
    NonScalarRoot { shape: String },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("{context} is empty")]
    Empty { context: String },

    #[error("{context}: expected {expected}, got {got}")]
    LengthMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("rotation angle {angle} is within 1e-6 of pi; log map undefined")]
    NearPiRotation { angle: f64 },

    #[error("degenerate geometry: {detail}")]
    DegenerateGeometry { detail: String },

    #[error("too few effective correspondences: need {needed}, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },

    #[error("registration of frames {source_frame} -> {target_frame} failed: {source}")]
    RegistrationFailed {
        source_frame: usize,
        target_frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: need at least {needed} scans, got {got}")]
    TooFewScans {
        context: String,
        needed: usize,
        got: usize,
    },

    #[error("frame indices must be contiguous; gap after frame {after}")]
    NonContiguousFrames { after: usize },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    TrainDiverged { epoch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {reason}")]
    BadFile { path: PathBuf, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub(crate) fn invalid_config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn empty(context: impl Into<String>) -> Self {
        Error::Empty {
            context: context.into(),
        }
    }

    /// True for errors caused by bad user input (configs, files, preconditions)
    /// as opposed to failures arising during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::InvalidConfig { .. }
                | Error::Empty { .. }
                | Error::LengthMismatch { .. }
                | Error::TooFewScans { .. }
                | Error::NonContiguousFrames { .. }
                | Error::Parse { .. }
                | Error::BadFile { .. }
                | Error::Json(_)
        )
    }
}
