use std::path::PathBuf;

/// Errors produced by the engines, file formats and metrics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"SCE1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported dtype byte {dtype}")]
    BadDtype { path: PathBuf, dtype: u8 },
    #[error("{path}: truncated payload, header declares {expected} bytes but {found} are present")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("{path}: non-finite entry at index {index}")]
    NonFinite { path: PathBuf, index: usize },
    #[error("{path}: malformed header: {reason}")]
    BadHeader { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{name} = {value} is out of range: {expected}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("invalid block plan: {0}")]
    InvalidPlan(String),
    #[error("domain error: {0}")]
    Domain(String),

    #[error("line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error("{metric} requires full probability vectors, but record {index} has no `probs` field")]
    MissingProbs { metric: &'static str, index: usize },
    #[error("empty record set")]
    EmptyRecords,
    #[error("bin counts sum to {found}, expected {expected}")]
    CountMismatch { expected: usize, found: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_range(
    name: &'static str,
    value: f64,
    ok: bool,
    expected: &'static str,
) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value,
            expected,
        })
    }
}
