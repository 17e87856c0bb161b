//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is out of range or unknown.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file exists but its contents are malformed.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Numbered frames on disk skip an index.
    #[error("gap in frame numbering: missing {index:06}")]
    Gap { index: usize },

    /// The requested metric has no meaning for the selected embedder.
    #[error("unsupported metric: {0}")]
    Unsupported(String),

    #[error("{stage} failed{}: {source}", segment.map(|s| format!(" at segment {s}")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        segment: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str, segment: Option<usize>) -> Self {
        Error::Stage {
            stage,
            segment,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by bad input rather than the filesystem.
    pub fn is_usage(&self) -> bool {
        matches!(
            self.root(),
            Error::Contract(_) | Error::Config(_) | Error::Unsupported(_)
        )
    }
}
