//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Convenient alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model spec, config value, policy name, or solver setting.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad caller-supplied data (empty sequence, token out of range, length mismatch).
    #[error("input error: {0}")]
    Input(String),

    /// Tensor shape does not match what the operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// Cache append issued out of order.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Operation not valid in the current cache state.
    #[error("state error: {0}")]
    State(String),

    /// Malformed serialized artifact or corrupted block metadata.
    #[error("format error: {0}")]
    Format(String),

    /// A persisted table was calibrated against a different model.
    #[error("stale calibration: table was built for model {found}, expected {expected}")]
    StaleCalibration { expected: String, found: String },

    /// The budget cannot hold even the cheapest configuration on every layer.
    #[error("infeasible budget: need {required:.0} bytes, have {available:.0} (deficit {deficit:.0} bytes)")]
    Infeasible {
        required: f64,
        available: f64,
        deficit: f64,
    },

    /// Exhaustive search requested on an instance that is too large.
    #[error("instance too large: {0}")]
    Size(String),

    /// A sensitivity cell could not be computed (zero-norm reference with nonzero error).
    #[error("calibration failure: {0}")]
    Calibration(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
