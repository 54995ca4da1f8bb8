use std::fmt;

use thiserror::Error;

pub type Result<T, E = CscError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CscError {
    /// Invalid user-supplied configuration. Detected before any side effect.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("degenerate batch: {valid} valid regions, need at least 2")]
    DegenerateBatch { valid: usize },

    #[error("semantic class {0} has no prototype")]
    MissingClass(u16),

    #[error("empty prototype bank: no valid regions in input")]
    EmptyBank,

    /// A cache was handed to a backward pass it was not produced for.
    #[error("stale cache for {0}: parameters changed since the forward pass")]
    StaleCache(&'static str),

    #[error("training failed: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CscError {
    pub fn shape(context: &'static str, expected: impl fmt::Display, actual: impl fmt::Display) -> Self {
        CscError::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Validation failures (bad configuration or malformed input files) map
    /// to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(self, CscError::Config(_) | CscError::Format(_))
    }
}

/// Binary decoding failure with the byte offset where it was detected.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("format error at byte {offset}: {kind}")]
pub struct FormatError {
    pub offset: u64,
    pub kind: FormatErrorKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatErrorKind {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("file truncated inside {section}")]
    Truncated { section: String },
    #[error("invalid {section}: {reason}")]
    Invalid { section: String, reason: String },
    #[error("{0} trailing bytes after last section")]
    TrailingBytes(u64),
}
