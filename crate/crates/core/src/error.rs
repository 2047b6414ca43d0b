use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown category `{0}`")]
    Vocabulary(String),

    #[error("incomplete layout: {0}")]
    IncompleteLayout(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("impossible transition: {0}")]
    ImpossibleTransition(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("internal invariant breach: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's data rather than by this crate.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Invariant(_))
    }

    /// Short stable identifier used in machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Vocabulary(_) => "vocabulary",
            Error::IncompleteLayout(_) => "incomplete_layout",
            Error::Shape(_) => "shape",
            Error::Parse { .. } => "parse",
            Error::Schedule(_) => "schedule",
            Error::Domain(_) => "domain",
            Error::ImpossibleTransition(_) => "impossible_transition",
            Error::Degenerate(_) => "degenerate",
            Error::Data(_) => "data",
            Error::Range(_) => "range",
            Error::IncompatibleCheckpoint(_) => "incompatible_checkpoint",
            Error::Integrity(_) => "integrity",
            Error::Invariant(_) => "invariant",
            Error::Io { .. } => "io",
        }
    }
}
