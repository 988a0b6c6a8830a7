//! Crate-wide error type with stable process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid specification, shape, or option. Exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or out-of-range data (datasets, labels, checkpoints). Exit code 3.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss. Exit code 4.
    #[error("divergence at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },

    /// An allocation plan failed verification or was violated at runtime. Exit code 5.
    #[error("plan bug at step {step}: {msg}")]
    PlanBug { step: usize, msg: String },

    /// Misuse of the API or CLI (e.g. backward before forward). Exit code 2.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn plan_bug(step: usize, msg: impl Into<String>) -> Self {
        Error::PlanBug { step, msg: msg.into() }
    }

    /// Process exit code for the CLI: 0 ok, 2 config, 3 data, 4 divergence, 5 plan bug.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Divergence { .. } => 4,
            Error::PlanBug { .. } => 5,
        }
    }

    /// Single-line machine-parseable prefix, e.g. `E2:config`.
    pub fn code_prefix(&self) -> &'static str {
        match self {
            Error::Config(_) => "E2:config",
            Error::Usage(_) => "E2:usage",
            Error::Data(_) => "E3:data",
            Error::Io(_) => "E3:io",
            Error::Divergence { .. } => "E4:divergence",
            Error::PlanBug { .. } => "E5:plan",
        }
    }
}
