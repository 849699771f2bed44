use std::fmt;
use std::process::ExitCode;

use qlr_core::Error;

/// Command failure, categorized so each kind exits with its own code.
#[derive(Debug)]
pub enum CliError {
    /// Config file, override or schema problem.
    Config(String),
    /// A required file or upstream artifact is absent.
    MissingInput(String),
    InfeasiblePlan(String),
    MissingEfficiency(String),
    /// An artifact exists but cannot be decoded.
    Corrupt(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::MissingInput(_) => 4,
            CliError::InfeasiblePlan(_) => 5,
            CliError::MissingEfficiency(_) => 6,
            CliError::Corrupt(_) => 7,
            CliError::Runtime(_) => 8,
        }
    }

    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config error",
            CliError::MissingInput(_) => "missing input",
            CliError::InfeasiblePlan(_) => "infeasible tile plan",
            CliError::MissingEfficiency(_) => "missing efficiency entry",
            CliError::Corrupt(_) => "corrupt artifact",
            CliError::Runtime(_) => "runtime error",
        }
    }

    pub fn exit(&self) -> ExitCode {
        ExitCode::from(self.exit_code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            CliError::Config(m)
            | CliError::MissingInput(m)
            | CliError::InfeasiblePlan(m)
            | CliError::MissingEfficiency(m)
            | CliError::Corrupt(m)
            | CliError::Runtime(m) => m,
        };
        write!(f, "{}: {msg}", self.category())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_)
            | Error::Replay(_)
            | Error::Label { .. }
            | Error::Dimension(_)
            | Error::Geometry(_) => CliError::Config(msg),
            Error::InfeasiblePlan { .. } => CliError::InfeasiblePlan(msg),
            Error::MissingEfficiency(_) => CliError::MissingEfficiency(msg),
            Error::Format(_) => CliError::Corrupt(msg),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingInput(msg)
            }
            Error::Io(_) | Error::State(_) | Error::Calibration(_) => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
