use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A value outside an operation's mathematical domain.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    /// Invalid model, partition or augmentation specification.
    #[error("invalid specification: {0}")]
    Spec(String),

    /// Malformed binary input, with the byte offset where parsing stopped.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    /// Every problem found while validating an experiment configuration.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("metrics parse error at line {line}: {detail}")]
    Metrics { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Spec(_))
    }
}
