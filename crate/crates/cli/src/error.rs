use thiserror::Error;

use dri_ite_core::Error as CoreError;

/// Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("replication {replication}: {source}")]
    Replication {
        replication: usize,
        #[source]
        source: Box<CliError>,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Replication { source, .. } => source.exit_code(),
            CliError::Io(_) | CliError::Json(_) => 2,
            CliError::Core(core) => match core {
                CoreError::InvalidConfig(_)
                | CoreError::InvalidNetworkSpec(_)
                | CoreError::BadFractions(_) => 1,
                CoreError::Divergence { .. }
                | CoreError::NonFinite { .. }
                | CoreError::NonScalarRoot { .. }
                | CoreError::NonFiniteProbe { .. } => 3,
                _ => 2,
            },
        }
    }
}
