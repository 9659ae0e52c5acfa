use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error(transparent)]
    Core(#[from] clmtrace::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit status; 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        use clmtrace::Error as E;
        match self {
            CliError::ConfigInvalid(_) => 3,
            CliError::MissingArtifact(_) => 4,
            CliError::Core(e) => match e {
                E::BadMagic | E::VersionMismatch { .. } | E::TruncatedFile | E::MalformedCheckpoint(_) => 5,
                E::SuspectUnavailable { .. } => 6,
                E::TrainingDiverged { .. } | E::EmbedDiverged { .. } => 7,
                E::Io(_) => 9,
                _ => 8,
            },
            CliError::Io(_) => 9,
            CliError::Json(_) => 10,
        }
    }
}
