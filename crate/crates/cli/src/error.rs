use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    NumericFault(String),

    #[error("{0}")]
    Assertion(String),

    #[error(transparent)]
    Core(xflab_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit code: 2 config, 3 numeric fault, 4 failed assertion, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NumericFault(_) => 3,
            CliError::Assertion(_) => 4,
            CliError::Core(e) if e.is_numeric_fault() => 3,
            CliError::Core(xflab_core::Error::Config { .. }) => 2,
            _ => 1,
        }
    }
}

impl From<xflab_core::Error> for CliError {
    fn from(e: xflab_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(format!("json: {e}"))
    }
}
