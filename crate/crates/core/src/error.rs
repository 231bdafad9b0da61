use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("fixed-point overflow: {0}")]
    Overflow(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("latent {value} (mantissa) in dimension {dim} is outside the coding support [{lo}, {hi})")]
    OutOfSupport { dim: usize, value: i64, lo: i64, hi: i64 },

    #[error("model error: {0}")]
    Model(String),

    #[error("malformed stream: {0}")]
    Stream(String),

    #[error("model hash mismatch: container was produced with a different model")]
    ModelMismatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
