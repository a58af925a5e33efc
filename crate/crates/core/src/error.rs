//! Error type shared across the library.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible shapes for the named operation.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operand violated an operation's domain (log of a non-positive
    /// value, sqrt of a negative value, zero raised to a negative power, ...).
    #[error("{op}: domain violation: {msg}")]
    Domain { op: &'static str, msg: String },

    /// A gather/index referenced a position outside the axis.
    #[error("{op}: index {index} out of bounds for axis of length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },

    /// Reverse-mode differentiation only starts from scalar outputs.
    #[error("gradient target must be a scalar, got shape {shape:?}")]
    NonScalarGradTarget { shape: Vec<usize> },

    /// A NaN or infinity appeared where the caller required finite values.
    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    /// The truncated inverse-curvature series grew instead of contracting,
    /// which almost always means the scale exceeds 1/L for the local
    /// curvature bound L.
    #[error(
        "inverse-curvature series diverging at term {term} \
         (norm grew by {growth:.3e}x); reduce the series scale"
    )]
    SeriesDiverged { term: usize, growth: f64 },

    /// A configuration value failed validation; the message names the field.
    #[error("invalid config: {0}")]
    Config(String),

    /// A CSV file could not be parsed; 1-based line number included.
    #[error("csv: line {line}: {msg}")]
    CsvParse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
