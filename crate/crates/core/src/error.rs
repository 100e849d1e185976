use thiserror::Error;

/// Errors shared by all kernel modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("gradient has (near-)zero Frobenius norm")]
    ZeroGradient,

    #[error("index order violated: i={i} exceeds j={j}")]
    IndexOrder { i: usize, j: usize },

    #[error("schedule length {got} does not match chunk count {expected}")]
    ScheduleLengthMismatch { expected: usize, got: usize },

    #[error("trajectory incompatible with reconstruction mode {mode}: {reason}")]
    IncompatibleMode { mode: &'static str, reason: String },

    #[error("unsupported configuration for parallel execution: {0}")]
    UnsupportedConfig(String),

    #[error("variant id {0} out of range 0..=6")]
    BadVariant(u8),

    #[error("non-finite entry in matrix construction")]
    NonFinite,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sequence length {len} is not divisible by chunk length {chunk_len}")]
    ChunkBoundary { len: usize, chunk_len: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
