//! Crate-wide error type. Variants map onto the CLI exit-code contract:
//! configuration/validation/contract/ingestion problems exit with 2,
//! runtime and I/O failures with 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A config file failed to parse or referenced an unknown key.
    #[error("configuration error: {0}")]
    Config(String),
    /// A validated value violated a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),
    /// An operation was called with arguments outside its contract.
    #[error("contract error: {0}")]
    Contract(String),
    /// A dataset directory or case record is malformed.
    #[error("ingestion error: {0}")]
    Ingestion(String),
    /// Metric evaluation could not produce a defined result.
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl Error {
    /// CLI exit code for this error class (0 = success, 1 = usage).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Contract(_)
            | Error::Ingestion(_) => 2,
            Error::Eval(_) | Error::Io(_) | Error::Runtime(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
