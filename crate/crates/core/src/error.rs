use std::fmt;

/// Errors produced anywhere in the crate.
///
/// The variants map onto the CLI exit codes: contract violations and bad
/// configuration are usage errors, parse/IO problems are data errors and
/// non-finite values are numerical failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    /// Missing or inconsistent dataset files.
    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    pub fn parse(offset: usize, msg: impl fmt::Display) -> Self {
        Error::Parse {
            offset,
            msg: msg.to_string(),
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) => 1,
            Error::Parse { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
