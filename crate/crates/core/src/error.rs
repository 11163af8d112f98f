use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("duplicate intent name `{0}`")]
    DuplicateIntent(String),

    #[error("empty split `{0}`")]
    EmptySplit(String),

    #[error("unknown intent `{intent}` ({context})")]
    UnknownIntent { intent: String, context: String },

    #[error("invalid utterance: {0}")]
    InvalidUtterance(String),

    #[error("invalid few-shot plan: {0}")]
    InvalidPlan(String),

    #[error("dataset has no domain annotations")]
    MissingDomains,

    #[error("group index {index} out of range (S = {groups})")]
    GroupOutOfRange { index: usize, groups: usize },

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(&'static str),

    #[error("completion endpoint error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Endpoint { status: Option<u16>, message: String },

    #[error("corrupt cache record {path}: {reason}")]
    CacheCorrupt { path: PathBuf, reason: String },

    #[error("generation shortfall for intent `{intent}`: wanted {wanted}, got {got}")]
    Shortfall {
        intent: String,
        wanted: usize,
        got: usize,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("review error: {0}")]
    Review(String),

    #[error("external classifier error: {0}")]
    External(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any [`Error::Context`] layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
