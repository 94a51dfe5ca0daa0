use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("could not parse config: {0}")]
    Parse(String),
    #[error("unknown command `{0}` (expected one of validate, value, potential, certificate, snell, reflected, pde, verify)")]
    UnknownCommand(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("writing {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Core(#[from] shjb_core::Error),
}

impl CliError {
    /// Process exit code: 2 for bad input, 3 for solver or I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Parse(_) | CliError::UnknownCommand(_) => 2,
            _ => 3,
        }
    }
}
