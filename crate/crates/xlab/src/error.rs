use std::fmt;
use std::path::{Path, PathBuf};

pub type Result<T, E = XlabError> = std::result::Result<T, E>;

#[derive(Debug)]
pub enum XlabError {
    Core(xlab_core::Error),
    Io { path: PathBuf, source: std::io::Error },
    /// A config field failed validation; `field` is a dotted path.
    Config { field: String, message: String },
    /// Config text could not be parsed.
    ConfigSyntax(String),
    Json(String),
    Csv(String),
    /// Trend analysis needs reports for more seeds than are present.
    InsufficientSeeds { found: usize, required: usize },
    /// The service could not bind or start.
    Service(String),
    /// An experiment stage failed; details are also in the manifest.
    Stage { stage: String, source: Box<XlabError> },
    /// Mandatory trend checks failed; names the failing checks.
    TrendsFailed(Vec<String>),
}

impl XlabError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Stable machine-readable error code.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(e) => match e {
                xlab_core::Error::BudgetExhausted { .. } => "budget_exhausted",
                xlab_core::Error::BudgetExceedsPool { .. } => "budget_exceeds_pool",
                xlab_core::Error::BatchTooLarge { .. } => "batch_too_large",
                xlab_core::Error::Transport(_) => "transport",
                xlab_core::Error::MalformedResponse(_) => "malformed_response",
                xlab_core::Error::Corrupt(_) | xlab_core::Error::UnsupportedVersion(_) => "corrupt_file",
                xlab_core::Error::InvalidConfig(_) | xlab_core::Error::InvalidSpec { .. } => "invalid_config",
                _ => "core",
            },
            Self::Io { .. } => "io",
            Self::Config { .. } | Self::ConfigSyntax(_) => "invalid_config",
            Self::Json(_) => "json",
            Self::Csv(_) => "csv",
            Self::InsufficientSeeds { .. } => "insufficient_seeds",
            Self::Service(_) => "service",
            Self::Stage { source, .. } => source.kind(),
            Self::TrendsFailed(_) => "trends_failed",
        }
    }
}

impl fmt::Display for XlabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Core(e) => e.fmt(f),
            Self::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Self::Config { field, message } => write!(f, "config field `{field}`: {message}"),
            Self::ConfigSyntax(msg) => write!(f, "config syntax: {msg}"),
            Self::Json(msg) => write!(f, "json: {msg}"),
            Self::Csv(msg) => write!(f, "csv: {msg}"),
            Self::InsufficientSeeds { found, required } => write!(
                f,
                "trend analysis needs reports for at least {required} seeds, found {found}"
            ),
            Self::Service(msg) => write!(f, "service: {msg}"),
            Self::Stage { stage, source } => write!(f, "stage `{stage}` failed: {source}"),
            Self::TrendsFailed(names) => write!(f, "mandatory trend checks failed: {}", names.join(", ")),
        }
    }
}

impl std::error::Error for XlabError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Core(e) => Some(e),
            Self::Io { source, .. } => Some(source),
            Self::Stage { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<xlab_core::Error> for XlabError {
    fn from(e: xlab_core::Error) -> Self {
        Self::Core(e)
    }
}

impl From<serde_json::Error> for XlabError {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e.to_string())
    }
}

impl From<csv::Error> for XlabError {
    fn from(e: csv::Error) -> Self {
        Self::Csv(e.to_string())
    }
}
