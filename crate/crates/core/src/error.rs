use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped so that the command-line front end can map them to
/// stable exit codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (length mismatch, bad exponent, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A standardized weight row has zero variance, so its scale is undefined.
    #[error("degenerate weight row {row} in {layer}: zero variance")]
    DegenerateRow { layer: String, row: usize },

    #[error("graph spec error at line {line}: {msg}")]
    Spec { line: usize, msg: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// A tensor became NaN or infinite during training.
    #[error("non-finite values in tensor `{tensor}` at step {step}")]
    NonFinite { tensor: String, step: u64 },

    /// A value cannot be represented in the chosen fixed-point format.
    #[error("export error: {0}")]
    Export(String),

    #[error("format error in section `{section}`: {msg}")]
    Format { section: String, msg: String },

    #[error("unexpected end of section `{section}`")]
    UnexpectedEof { section: String },

    #[error("integrity error: CRC mismatch in section `{section}` (stored {stored:#010x}, computed {computed:#010x})")]
    Integrity {
        section: String,
        stored: u32,
        computed: u32,
    },

    #[error("checkpoint does not match graph: {0}")]
    CheckpointMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(section: &str, msg: impl Into<String>) -> Self {
        Error::Format {
            section: section.to_string(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the CLI.
    ///
    /// 2 = configuration, 3 = data, 4 = numerical abort, 5 = model/checkpoint
    /// file problems, 6 = export refused, 1 = anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec { .. } | Error::Graph(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::NonFinite { .. } => 4,
            Error::Format { .. }
            | Error::UnexpectedEof { .. }
            | Error::Integrity { .. }
            | Error::CheckpointMismatch(_) => 5,
            Error::Export(_) | Error::DegenerateRow { .. } => 6,
            Error::Contract(_) | Error::Shape(_) => 1,
        }
    }
}
