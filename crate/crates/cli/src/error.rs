use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Malformed or invalid run matrix / arguments (exit code 3).
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] featgeom::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNS_FAILED: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

impl CliError {
    /// Process exit code: invalid inputs are 3, runtime failures 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Json(_) => EXIT_CONFIG,
            CliError::Core(featgeom::Error::InvalidArgument(_)) => EXIT_CONFIG,
            _ => EXIT_RUNS_FAILED,
        }
    }
}
