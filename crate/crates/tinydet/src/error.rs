//! Crate-wide error type for fallible, user-facing operations (file I/O,
//! configuration, checkpoints, training control). Misuse of numeric
//! kernels (shape mismatches and the like) panics with a descriptive
//! message instead; those are programming errors, not runtime states.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Configuration file problem, with 1-based line number when known.
    Config { line: Option<usize>, message: String },
    /// Checkpoint file is missing, malformed, or does not match the model.
    Checkpoint(String),
    /// Training produced a non-finite loss at the given optimizer step.
    Diverged { step: usize },
    /// Underlying I/O failure, annotated with the path involved.
    Io { path: String, source: std::io::Error },
    /// Anything else surfaced to the CLI.
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config { line: Some(n), message } => {
                write!(f, "config error at line {n}: {message}")
            }
            Error::Config { line: None, message } => write!(f, "config error: {message}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Diverged { step } => {
                write!(f, "training diverged: non-finite loss at step {step}")
            }
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(line: usize, message: impl Into<String>) -> Self {
        Error::Config { line: Some(line), message: message.into() }
    }
}
