use std::path::Path;

use thiserror::Error;

/// A failed command, classified by exit code.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Failure::Validation(msg.into())
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Failure::Io(format!("{}: {err}", path.display()))
    }
}

impl From<markbench::Error> for Failure {
    fn from(e: markbench::Error) -> Self {
        match e {
            markbench::Error::Usage(_) => Failure::Usage(e.to_string()),
            markbench::Error::Io(_) => Failure::Io(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;
