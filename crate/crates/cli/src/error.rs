use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("refusing to overwrite {0} (pass --force)")]
    Overwrite(String),
    #[error("{0}")]
    Runtime(String),
    #[error("report error: {0}")]
    Report(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Overwrite(_) => 3,
            CliError::Runtime(_) | CliError::Report(_) => 4,
        }
    }
}

impl From<modngd::Error> for CliError {
    fn from(e: modngd::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
