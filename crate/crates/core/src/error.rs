//! Error type shared across the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unsupported rate: {0}")]
    UnsupportedRate(String),
    #[error("insufficient length: need at least {required} frames, got {actual}")]
    InsufficientLength { required: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("state error: {0}")]
    State(String),
    #[error("unsupported format version {found}, this build reads up to version {supported}")]
    VersionMismatch { found: u16, supported: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) | Error::State(_) => 3,
            _ => 2,
        }
    }
}
