use std::path::Path;

/// Failures surfaced by file formats, spec handling and scenarios.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The experiment spec (or something it names) is unusable. Maps to exit 2.
    #[error("spec error: {0}")]
    Spec(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] moebuf_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Spec(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn spec_err(msg: impl Into<String>) -> Error {
    Error::Spec(msg.into())
}
