use std::fmt;
use std::process::ExitCode;

use sit_core::Error;

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_CHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn io(context: impl fmt::Display, err: impl fmt::Display) -> Self {
        Self::new(EXIT_IO, format!("{context}: {err}"))
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn code_for(err: &Error) -> u8 {
    match err {
        Error::DivergenceDetected { .. }
        | Error::DegenerateVariance
        | Error::ShapeMismatch { .. }
        | Error::NonDeterministicLayer(_)
        | Error::NonFinite(_) => EXIT_CHECK,
        Error::InvalidConfig(_)
        | Error::EmptyDataset
        | Error::EmptyBatch
        | Error::InvalidShape { .. }
        | Error::InvalidKernel(_)
        | Error::InvalidRate(_)
        | Error::LengthMismatch { .. } => EXIT_USAGE,
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::TruncatedPayload { .. }
        | Error::MalformedFile(_)
        | Error::UnknownTensorName(_)
        | Error::MissingTensor(_)
        | Error::BadDimensions { .. } => EXIT_IO,
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        Self::new(code_for(&err), err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
