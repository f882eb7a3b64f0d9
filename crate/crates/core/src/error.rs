use std::io;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    /// An SGD step was requested while at least one buffer was empty.
    #[error("sgd step requested while buffers {empty:?} are empty")]
    NotReady { empty: Vec<usize> },

    #[error(
        "starvation: no SGD step between sim time {last_step_time} and {now} \
         (window {window}); empty buffers {empty_buffers:?}"
    )]
    Starvation {
        now: f64,
        last_step_time: f64,
        window: f64,
        empty_buffers: Vec<usize>,
    },

    #[error("invalid pairing: {0}")]
    InvalidPairing(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
