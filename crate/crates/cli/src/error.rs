use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] skip2lora::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for bad input, 2 for I/O failures, 3 for numeric contract violations.
    pub fn exit_code(&self) -> u8 {
        use skip2lora::Error as E;
        match self {
            Self::Core(E::Io { .. }) | Self::Io { .. } => 2,
            Self::Core(E::Contract(_)) => 3,
            Self::Json { source, .. } if source.is_io() => 2,
            _ => 1,
        }
    }
}
