use std::path::PathBuf;

use crate::schema::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Plan,
    Data,
    Runtime,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    InvalidSchema(ValidationReport),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("fusion error: {0}")]
    Fusion(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("detector error: {0}")]
    Detector(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("toml: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Plan(_) | Error::Config(_) | Error::TomlDe(_) | Error::TomlSer(_) => {
                ErrorKind::Plan
            }
            Error::InvalidSchema(_)
            | Error::SchemaMismatch(_)
            | Error::Input(_)
            | Error::Stratification(_)
            | Error::Csv(_)
            | Error::Partition(_)
            | Error::Io { .. } => ErrorKind::Data,
            _ => ErrorKind::Runtime,
        }
    }
}
