use thiserror::Error;

/// Errors produced anywhere in the task-selection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Matrix or vector shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A file could not be parsed. `offset` is the byte offset where parsing failed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// A file was written by an incompatible format version.
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// A failure attributed to one task of a batch or corpus.
    #[error("task {task_id}: {source}")]
    Task {
        task_id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Attach a task id to an error.
    pub fn in_task(self, task_id: u64) -> Self {
        Error::Task { task_id, source: Box::new(self) }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::Task { source, .. } => source.kind(),
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
