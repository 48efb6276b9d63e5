use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("sequence of {len} positions exceeds max_positions {max}")]
    ContextLength { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },
    #[error("parameter `{0}` has no gradient; run backward before stepping")]
    MissingGrad(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("model/environment modality mismatch: {0}")]
    Modality(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the CLI for machine-readable failures.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::ContextLength { .. } => "context_length",
            Error::Vocabulary { .. } => "vocabulary",
            Error::MissingGrad(_) => "missing_grad",
            Error::Contract(_) => "contract",
            Error::Degenerate(_) => "degenerate",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non_finite",
            Error::Modality(_) => "modality",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
