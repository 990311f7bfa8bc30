use thiserror::Error;

use crate::engine::RunTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite weight at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },

    #[error("example index {index} out of range for {len} training examples")]
    Index { index: usize, len: usize },

    #[error("loss {loss} is below the supplied optimum F* = {f_star}; F* is probably wrong")]
    BetterThanOptimum { loss: f64, f_star: f64 },

    #[error("full gradient vanished; the iterate is stationary")]
    Stationary,

    #[error("run diverged at update {k}: train loss {loss}")]
    Diverged {
        k: u64,
        loss: f64,
        partial: Box<RunTrace>,
    },

    #[error("cannot fit: {0}")]
    CannotFit(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
