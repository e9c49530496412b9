use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the audit toolkit.
///
/// Every data-dependent variant carries the offending key (file, image id,
/// model/variant pair) so callers can report it verbatim.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("checksum mismatch for {key}: manifest says {expected}, file hashes to {actual}")]
    ChecksumMismatch {
        key: String,
        expected: String,
        actual: String,
    },
    #[error("dangling reference in {key}: image_id {image_id} is not in the metadata")]
    DanglingReference { key: String, image_id: String },
    #[error("non-finite value in {key} at image_id {image_id}")]
    NonFinite { key: String, image_id: String },
    #[error("duplicate {what}: {key}")]
    Duplicate { what: &'static str, key: String },
    #[error("zero embedding row for image_id {0}")]
    ZeroRow(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("unknown image_id {0}")]
    UnknownId(String),
    #[error("query {0} has no relevant gallery item")]
    ExcludedQuery(String),
    #[error("point is off the hyperboloid (-<u,v>_L = {0})")]
    OffManifold(f64),
    #[error("degenerate pairing: {0}")]
    DegeneratePairing(String),
    #[error("incomplete seeds for pair {pair}: {detail}")]
    IncompleteSeeds { pair: String, detail: String },
    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
