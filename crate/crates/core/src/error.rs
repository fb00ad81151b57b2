use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("eigensolver did not converge after {iterations} iterations (max residual {max_residual:.3e})")]
    NoConvergence { iterations: usize, max_residual: f64 },

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("optimization diverged at step {step}: loss {loss:.3e}, best {best:.3e}")]
    Diverged { step: usize, loss: f64, best: f64 },

    #[error("optimization stalled: {0}")]
    Stalled(String),

    #[error("checksum mismatch: manifest says {expected:016x}, payload hashes to {actual:016x}")]
    ChecksumMismatch { expected: u64, actual: u64 },

    #[error("unsupported schema version {found} (this build reads version {expected})")]
    SchemaMismatch { found: u32, expected: u32 },

    #[error("truncated payload {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("artifact kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Manifest(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}

pub(crate) fn ensure_dims(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(msg()))
    }
}
