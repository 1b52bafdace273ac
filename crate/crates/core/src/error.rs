use std::io;

use thiserror::Error;

/// Errors raised anywhere in the prediction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An invalid configuration value (width, head count, cluster count, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Input data that cannot be processed (empty series, unknown record, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Geometrically or statistically degenerate input (fully masked row, invalid focal agent).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Operation invoked in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// A value became NaN or infinite.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Binary container could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// A documented contract between components was broken.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A service could not start (for example, a port is already bound).
    #[error("startup error: {0}")]
    Startup(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
