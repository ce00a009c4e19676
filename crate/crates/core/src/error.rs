use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Each variant maps onto a stable, machine-parsable category via
/// [`Error::category`], which the CLI prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    Numeric(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),

    #[error("graph has no valid vertices")]
    EmptyGraph,

    #[error("point set is empty")]
    EmptySet,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::NotScalar(_) | Error::UnknownVar(_) => "shape",
            Error::NonFinite { .. } | Error::Numeric(_) => "numeric",
            Error::EmptyGraph | Error::EmptySet => "empty",
            Error::Config(_) => "config",
            Error::Data(_) | Error::Json { .. } => "data",
            Error::Checkpoint(_) | Error::MissingParam(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
