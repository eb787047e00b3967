use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown viewpoint {viewpoint} (model has {count})")]
    UnknownViewpoint { viewpoint: usize, count: usize },

    #[error("rejection sampling exceeded {attempts} attempts in cell {cell:?}")]
    RejectionCap {
        attempts: usize,
        cell: [(f64, f64); 3],
    },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { loss: f64, epoch: usize, batch: usize },

    #[error("stale conditioning cache (built for version {cached}, parameters at {current})")]
    StaleCache { cached: u64, current: u64 },

    #[error("mode set: {0}")]
    ModeSet(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed record: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
