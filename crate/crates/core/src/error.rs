use thiserror::Error;

/// Errors surfaced by the pruning laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("fully masked softmax slice")]
    FullyMaskedSlice,
    #[error("query fully masked")]
    QueryFullyMasked,
    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SeqOverflow { len: usize, max_seq: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
