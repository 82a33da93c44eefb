use std::fmt;
use std::process::ExitCode;

use mods::Error;

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid run configuration.
    Config(String),
    /// Missing, malformed or incompatible data or checkpoints.
    Data(String),
    /// Non-finite values or failed gradient checks.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) => CliError::Config(msg),
            Error::NonFinite { .. } | Error::Diverged { .. } => CliError::Numerical(msg),
            Error::Dimension { .. }
            | Error::Shape { .. }
            | Error::Io { .. }
            | Error::Truncated { .. }
            | Error::MissingModality { .. }
            | Error::DuplicateId(_)
            | Error::Dataset(_)
            | Error::UnknownSplit(_)
            | Error::Corrupt(_)
            | Error::Version { .. }
            | Error::Incompatible(_)
            | Error::Json(_) => CliError::Data(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
