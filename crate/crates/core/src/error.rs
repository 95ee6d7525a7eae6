use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` missing from CSV header")]
    MissingColumn(String),

    #[error("unknown category `{value}` in column `{column}` (row {row})")]
    UnknownCategory {
        column: String,
        value: String,
        row: usize,
    },

    #[error("row {row}, column `{column}`: cannot parse `{value}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("class {class} would receive no labeled rows")]
    EmptyClass { class: usize },

    #[error("{context}: index {index} out of range (< {bound} required)")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{context}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{context}: non-finite value")]
    NonFinite { context: &'static str },

    #[error("backward called twice on the same tape")]
    TapeReuse,

    #[error("contrastive batch is degenerate: {0}")]
    DegenerateBatch(&'static str),

    #[error("need at least {needed} points for the kNN graph, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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
