//! Failures carrying the process exit code: 2 config, 3 invariant
//! violation or mismatched artifacts, 4 missing artifact.

use std::fmt;

use spherediff::Error;

pub const CONFIG: u8 = 2;
pub const INVARIANT: u8 = 3;
pub const MISSING: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitError {
    pub code: u8,
    pub message: String,
}

impl ExitError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: CONFIG,
            message: message.into(),
        }
    }

    pub fn invariant(message: impl Into<String>) -> Self {
        Self {
            code: INVARIANT,
            message: message.into(),
        }
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self {
            code: MISSING,
            message: message.into(),
        }
    }

    /// A library error raised while checking configuration.
    pub fn config_from(e: Error) -> Self {
        Self::config(e.to_string())
    }
}

impl From<Error> for ExitError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Self::missing(e.to_string()),
            _ => Self::invariant(e.to_string()),
        }
    }
}

impl From<std::io::Error> for ExitError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl fmt::Display for ExitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ExitError {}
