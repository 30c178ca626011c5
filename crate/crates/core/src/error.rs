use std::path::PathBuf;

use thiserror::Error;
use vemfuse_diffmath::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("triple {0} appears in more than one split ({1} and {2})")]
    Leakage(String, &'static str, &'static str),
    #[error("graph already has inverse relations")]
    AlreadyAugmented,
    #[error("graph has no inverse relations; augment first")]
    NotAugmented,
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("id {id} out of range for {what} (size {size})")]
    OutOfRange {
        what: &'static str,
        id: usize,
        size: usize,
    },
    #[error("empty label set")]
    EmptyLabelSet,
    #[error("misaligned inputs: {0} vs {1}")]
    Misaligned(usize, usize),
    #[error("enumeration of {0} configurations exceeds the bound {1}")]
    EnumerationTooLarge(u128, u128),
    #[error("non-finite {what} at {context}")]
    NonFinite { what: String, context: String },
    #[error("could not sample an entity with connected relations after {0} retries")]
    RetriesExhausted(usize),
    #[error("target entity {0} is in the filtered set")]
    TargetFiltered(usize),
    #[error("query sets differ: {0}")]
    QueryMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
