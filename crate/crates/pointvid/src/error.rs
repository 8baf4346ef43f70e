use std::path::PathBuf;

/// Errors of the file-level pipeline. Each maps to a stable exit code.
#[derive(Debug, thiserror::Error)]
pub enum PvError {
    #[error("{path}: format error at byte {offset}: {msg}")]
    Format { path: PathBuf, offset: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Bad flags, config values or missing inputs.
    #[error("{0}")]
    Input(String),

    /// Data-dependent failure inside the pipeline.
    #[error("{0}")]
    Pipeline(String),

    /// Stage / checkpoint mismatch.
    #[error("{0}")]
    Staging(String),

    #[error(transparent)]
    Core(#[from] pointvid_core::Error),
}

impl PvError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PvError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use pointvid_core::Error as E;
        match self {
            PvError::Format { .. } | PvError::Io { .. } | PvError::Json { .. } | PvError::Input(_) => 2,
            PvError::Pipeline(_) => 3,
            PvError::Staging(_) => 4,
            PvError::Core(e) => match e {
                E::Pipeline(_) | E::NonFinite { .. } | E::ProjectionDomain { .. } | E::Graph { .. } => 3,
                E::Layout { .. } => 4,
                _ => 2,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, PvError>;
