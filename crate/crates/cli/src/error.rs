use thiserror::Error;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or inputs.
    #[error("{0}")]
    Config(String),
    /// Non-finite values or divergence.
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<frameguide::Error> for CliError {
    fn from(e: frameguide::Error) -> Self {
        use frameguide::Error as E;
        let msg = e.to_string();
        if e.is_numerical() {
            CliError::Numerical(msg)
        } else if matches!(e, E::Io { .. } | E::Format { .. } | E::Json(_)) {
            CliError::Io(msg)
        } else {
            CliError::Config(msg)
        }
    }
}

pub fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
