use thiserror::Error;

use crate::tensor::ShapeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("trailing data: {0} unexpected bytes after payload")]
    TrailingData(usize),

    #[error("non-binary voxel value {value} at offset {offset}")]
    NonBinaryVoxel { offset: usize, value: u8 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("non-percolating: {0}")]
    NonPercolating(String),

    #[error("no inlet flow path")]
    NoInletFlowPath,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("tile coverage violated at voxel {0}")]
    CoverageViolated(usize),
}

impl Error {
    /// Errors caused by bad input (arguments, files, configs) rather than a
    /// failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::Truncated(_)
                | Error::TrailingData(_)
                | Error::NonBinaryVoxel { .. }
                | Error::InvalidArgument(_)
                | Error::DimMismatch(_)
                | Error::Checkpoint(_)
                | Error::Json(_)
                | Error::NonPercolating(_)
                | Error::NoInletFlowPath
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
