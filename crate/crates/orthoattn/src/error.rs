//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate basis: residual norm {norm:.3e} below 1e-8 for vector {index}")]
    DegenerateBasis { index: usize, norm: f64 },

    #[error("degenerate basis persisted after {0} redraws")]
    RedrawsExhausted(usize),

    #[error("frequency ({i},{j}) out of range for {h}x{w} grid")]
    FrequencyOutOfRange { i: u32, j: u32, h: usize, w: usize },

    #[error("wrong bank kind: expected {expected}, got {got}")]
    WrongKind { expected: String, got: String },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("unsupported version {got} (expected {expected})")]
    BadVersion { expected: u32, got: u32 },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("no cached forward pass; call forward before backward")]
    NoCachedForward,

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch between files: {0}")]
    DimMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code contract for the CLI: 2 usage/config, 3 failed check,
    /// 4 corrupt artifact, 5 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::Json(_) => 2,
            Error::DegenerateBasis { .. }
            | Error::RedrawsExhausted(_)
            | Error::WrongKind { .. }
            | Error::CheckFailed(_) => 3,
            Error::BadMagic { .. }
            | Error::Truncated(_)
            | Error::ChecksumMismatch { .. }
            | Error::BadVersion { .. } => 4,
            _ => 5,
        }
    }
}
