//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants are grouped by the CLI exit code they
/// map to: configuration/usage, data/format, numerical failure.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or argument values.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor/array shape mismatch; the message names both shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed or inconsistent on-disk data.
    #[error("data error: {0}")]
    Data(String),

    /// A forward computation produced NaN or Inf.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Checkpoint encoding/decoding failure.
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Checkpoint format failures, one variant per distinct corruption mode.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"D3CK\", got {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0} (supported: {1})")]
    VersionMismatch(u32, u32),

    #[error("payload CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("shape mismatch binding tensor {name}: checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("checkpoint is missing tensor {0:?} required by the model")]
    MissingTensor(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
