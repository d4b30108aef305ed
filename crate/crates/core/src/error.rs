use thiserror::Error;

/// Errors raised by the lmKAN library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range 0..={max}")]
    Index { index: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("unsupported preconditioning mode for fusion: {0}")]
    UnsupportedMode(String),

    #[error("batch norm: {0}")]
    BatchNorm(String),

    #[error("non-finite loss in phase {phase} at step {step} (pure {pure_loss}, total {total_loss})")]
    NonFinite {
        phase: u8,
        step: usize,
        pure_loss: f64,
        total_loss: f64,
    },

    #[error("model file format error: {0}")]
    Format(String),

    #[error("model file corrupted: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
