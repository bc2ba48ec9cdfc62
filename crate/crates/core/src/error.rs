use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("indexing failed: {0}")]
    Index(String),

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("recall is undefined: {0}")]
    UndefinedRecall(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("ledger: {0}")]
    Ledger(String),

    #[error("unknown review item `{0}`")]
    UnknownItem(String),

    #[error("review incomplete: {pending} item(s) still pending")]
    IncompleteReview { pending: usize },

    #[error("image decode failed for {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::InFile {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// True when the failure came from the filesystem or an undecodable
    /// raster rather than from invalid content.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Decode { .. } => true,
            Error::InFile { source, .. } => source.is_io(),
            Error::Csv(e) => e.is_io_error(),
            Error::Json(e) => e.is_io(),
            _ => false,
        }
    }

    /// Line number for parse failures, looking through file context.
    pub fn line(&self) -> Option<usize> {
        match self {
            Error::Parse { line, .. } => Some(*line),
            Error::InFile { source, .. } => source.line(),
            _ => None,
        }
    }
}
