use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum DcgError {
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("parse error in {file}, line {line}: {message}")]
    Parse { file: PathBuf, line: u64, message: String },

    #[error("invalid mask: row {row} has no available view")]
    InvalidMask { row: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape { context: String, expected: String, actual: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate row {0}: all entries are zero")]
    DegenerateRow(usize),

    #[error("infinite divergence: q[{row}][{col}] = 0 where p > 0")]
    InfiniteDivergence { row: usize, col: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite value in {component}{detail}")]
    NonFinite { component: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DcgError> = std::result::Result<T, E>;

pub(crate) fn shape_err(context: &str, expected: impl ToString, actual: impl ToString) -> DcgError {
    DcgError::Shape {
        context: context.to_string(),
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
