use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid mask: row {row} has no attendable position")]
    FullyMaskedRow { row: usize },

    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),

    #[error("backward called without a recorded forward pass: {0}")]
    NoForwardPass(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("{path}: line {line}: {msg}")]
    EmbeddingFile { path: PathBuf, line: usize, msg: String },

    #[error("malformed dataset at {locator}: {msg}")]
    Dataset { locator: String, msg: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CheckpointChecksum { stored: u32, computed: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::EmbeddingFile { .. }
            | Error::Dataset { .. }
            | Error::CheckpointVersion { .. }
            | Error::CheckpointChecksum { .. }
            | Error::CheckpointCorrupt(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            _ => 3,
        }
    }
}
