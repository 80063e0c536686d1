use std::path::PathBuf;

/// Harness errors; [`Error::exit_code`] maps them to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mtkd_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("dataset file {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{phase} diverged: {source}")]
    Diverged {
        phase: String,
        #[source]
        source: mtkd_core::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// 2 for configuration problems, 3 for numeric divergence, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Core(mtkd_core::Error::Config(_)) => 2,
            Error::Diverged { .. } | Error::Core(mtkd_core::Error::Numeric(_)) => 3,
            _ => 1,
        }
    }

    /// Tags a numeric failure with the phase it happened in.
    pub fn in_phase(self, phase: &str) -> Self {
        match self {
            Error::Core(e @ mtkd_core::Error::Numeric(_)) => Error::Diverged {
                phase: phase.to_string(),
                source: e,
            },
            other => other,
        }
    }
}
