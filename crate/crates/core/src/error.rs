use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error("bad magic bytes {found:02x?}, expected \"PSMX\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported bag file version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed bag header: {0}")]
    BadHeader(String),
    #[error("truncated bag file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("payload length mismatch: header declares {expected} bytes, file carries {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("non-finite feature value at instance {row}, dim {col}")]
    NonFinite { row: usize, col: usize },
    #[error("empty bag: m = {m}, d = {d}")]
    EmptyBag { m: usize, d: usize },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("bag {id}: feature dimension {found} does not match dataset dimension {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("bag {id}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        id: String,
        label: usize,
        num_classes: usize,
    },
    #[error("duplicate bag id {0}")]
    DuplicateId(String),
    #[error("invalid soft label: {0}")]
    SoftLabel(String),
    #[error("bag too small to divide: {m} instances into {n} pseudo-bags")]
    BagTooSmall { m: usize, n: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("pseudo-bag count mismatch: {a} vs {b}")]
    PseudoBagMismatch { a: usize, b: usize },
    #[error("cannot pair bag {0} with itself")]
    SelfPair(String),
    #[error("phenotype bank generation failed: {0}")]
    Bank(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (bag {bag})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        bag: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
