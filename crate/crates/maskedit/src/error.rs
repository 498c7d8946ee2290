use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] maskedit_core::Error),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Llm(#[from] crate::llm::LlmError),
    #[error("invalid manifest row {row}: {message}")]
    Manifest { row: usize, message: String },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// Stable identifier for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Core(e) => match e {
                maskedit_core::Error::Shape(_) => "shape",
                maskedit_core::Error::Domain(_) => "domain",
                maskedit_core::Error::Parse { .. } => "parse",
                maskedit_core::Error::Undefined(_) => "undefined",
                maskedit_core::Error::Vocabulary(_) => "vocabulary",
                maskedit_core::Error::Untrained => "untrained",
                maskedit_core::Error::Diverged { .. } => "diverged",
            },
            Error::Json { .. } => "json",
            Error::Csv { .. } => "csv",
            Error::Llm(_) => "llm",
            Error::Manifest { .. } => "manifest",
            Error::Usage(_) => "usage",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        message: message.into(),
    }
}
