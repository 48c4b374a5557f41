use std::fmt;
use std::process::ExitCode;

use hscl::HsclError;

/// Process exit status classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Usage = 1,
    Numerical = 2,
    Io = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            exit: Exit::Usage,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            exit: Exit::Io,
            message: message.into(),
        }
    }

    pub fn code(&self) -> ExitCode {
        ExitCode::from(self.exit as u8)
    }

    /// Prefixes the message with what was being done.
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

impl From<HsclError> for CliError {
    fn from(e: HsclError) -> Self {
        let exit = if e.is_numerical() {
            Exit::Numerical
        } else {
            match e {
                HsclError::Io(_)
                | HsclError::Csv(_)
                | HsclError::Image(_)
                | HsclError::Json(_)
                | HsclError::Checkpoint(_)
                | HsclError::Dataset(_) => Exit::Io,
                _ => Exit::Usage,
            }
        };
        Self {
            exit,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
