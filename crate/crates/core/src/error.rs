use thiserror::Error;

/// Errors produced by the lattice, model, and training layers.
///
/// Infeasible CTC targets are a dedicated variant rather than a `-inf` loss
/// so callers can skip or flag the offending sample.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible CTC target: need at least {required} frames for {target_len} labels ({repeats} adjacent repeats), got {frames}")]
    InfeasibleTarget {
        frames: usize,
        target_len: usize,
        repeats: usize,
        required: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
