use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("signal too short: {len} samples, need at least {required}")]
    SignalTooShort { len: usize, required: usize },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("capacity exceeded: packed spectrogram needs {required} slots, plane has {available}")]
    Capacity { required: usize, available: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("container error at {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
