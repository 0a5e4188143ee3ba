use std::process::ExitCode;

use ddm_core::Error as CoreError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Failures grouped by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Usage(_)
            | CoreError::InvalidSteps(_)
            | CoreError::StepOutOfRange { .. }
            | CoreError::Unsupported(_) => CliError::Usage(msg),
            CoreError::Numerical(_) => CliError::Numerical(msg),
            CoreError::Shape(_) | CoreError::Domain(_) | CoreError::Format(_) | CoreError::Io(_) => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
