use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or malformed input.
    #[error("{0}")]
    Input(String),
    /// The computation ran but produced nothing usable.
    #[error("{0}")]
    Compute(String),
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Compute(_) | CliError::Output { .. } => 1,
        }
    }
}
