//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by any layer of the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A row of an embedding matrix has (near-)zero norm and cannot be normalized.
    #[error("degenerate embedding: row {row} has norm {norm:e} (<= {eps:e})")]
    DegenerateRow { row: usize, norm: f64, eps: f64 },

    /// A scalar argument is outside its legal range.
    #[error("invalid parameter {name}: {message}")]
    Parameter { name: &'static str, message: String },

    /// A compute-graph contract was violated (non-scalar root, cyclic parents, ...).
    #[error("compute graph contract violated: {0}")]
    Contract(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Malformed caller-supplied data (empty corpus, out-of-vocabulary token, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Teacher ensemble members are mutually incompatible or unusable.
    #[error("teacher ensemble: {0}")]
    Ensemble(String),

    /// Training aborted (divergence, non-finite loss).
    #[error("training failed at step {step}: {message}")]
    Training { step: u64, message: String },

    /// A text file (pair TSV, config, checkpoint header) failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A binary blob (matrix, checkpoint) is malformed.
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    /// A diagnostic is undefined on the given population (zero variance, constant scores).
    #[error("diagnostic undefined: {0}")]
    Diagnostic(String),

    /// The synthetic generator could not satisfy its constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parameter(name: &'static str, message: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
