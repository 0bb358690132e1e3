use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("duplicate article id {0:?}")]
    DuplicateArticle(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("result depth k must be at least 1")]
    ZeroDepth,

    #[error("query parse error at offset {offset}: {message}")]
    QueryParse { offset: usize, message: String },

    #[error("grammar: {0}")]
    Grammar(String),

    #[error("episode aborted: {0}")]
    Episode(String),

    #[error("no active episode")]
    NoEpisode,

    #[error("episode is done")]
    Done,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Codes reported across the environment boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    ParseError,
    NoEpisode,
    Done,
    Other,
}

impl Error {
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::QueryParse { .. } => ErrorCode::ParseError,
            Error::NoEpisode => ErrorCode::NoEpisode,
            Error::Done => ErrorCode::Done,
            _ => ErrorCode::Other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::QueryParse {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
