use std::fmt;

use uniseq_core::Error;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: ExitCode::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: ExitCode::Data, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: ExitCode::Numeric, message: message.into() }
    }

    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } => ExitCode::Numeric,
            Error::Config(_) | Error::InvalidArgument(_) => ExitCode::Usage,
            _ => ExitCode::Data,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
