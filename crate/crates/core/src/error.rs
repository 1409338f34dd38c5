use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller-side precondition was violated (label range, scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A function under verification produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Two consecutive layer specs cannot be chained.
    #[error("model build error between layer {index} ({from}) and layer {next} ({to}): {detail}")]
    Build {
        index: usize,
        from: String,
        next: usize,
        to: String,
        detail: String,
    },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    /// An attack hit a non-finite loss.
    #[error("attack error on example {example}: {detail}")]
    Attack { example: usize, detail: String },

    /// Training produced a non-finite loss.
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by malformed input files rather than code or numerics.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            Error::Idx(_) | Error::Checkpoint(_) | Error::Io { .. } | Error::Json(_)
        )
    }

    /// True for non-finite values during attacks, training, or checks.
    pub fn is_numerical_error(&self) -> bool {
        matches!(
            self,
            Error::Attack { .. } | Error::NonFiniteLoss { .. } | Error::Evaluation(_)
        )
    }
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: wrong magic 0x{found:08x} (expected 0x{expected:08x})")]
    WrongMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("{path}: label {label} at index {index} is out of range")]
    BadLabel {
        path: PathBuf,
        index: usize,
        label: u8,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("checkpoint version mismatch: file has {found}, reader supports {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated blob: expected {expected} bytes, found {found}")]
    TruncatedBlob { expected: usize, found: usize },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("shape disagreement for {name}: header says {header}, architecture implies {implied}")]
    ShapeDisagreement {
        name: String,
        header: String,
        implied: String,
    },
    #[error("invalid header: {0}")]
    Header(String),
}
