use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The object is in a state that forbids the call (e.g. a second backward).
    #[error("invalid state: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("sequence length {len} exceeds max_context {max_context}")]
    Context { len: usize, max_context: usize },

    #[error("non-finite value: {0}")]
    Numerical(String),

    #[error("gradient check evaluation failed: {0}")]
    Evaluation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid UTF-8 in {path} at byte offset {offset}")]
    Decode { path: PathBuf, offset: u64 },

    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("file format version {found} is not supported (expected {expected}); upgrade needed")]
    UpgradeNeeded { found: u32, expected: u32 },

    #[error("config hash mismatch: checkpoint has {found}, model expects {expected}")]
    ConfigMismatch { expected: String, found: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Process exit code for the command-line front end:
    /// 1 numerical failure, 2 configuration/contract, 3 I/O and file format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::Evaluation(_) => 1,
            Error::Io { .. }
            | Error::Decode { .. }
            | Error::Format { .. }
            | Error::UpgradeNeeded { .. } => 3,
            _ => 2,
        }
    }
}
