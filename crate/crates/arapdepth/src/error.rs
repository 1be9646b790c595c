use std::path::{Path, PathBuf};

use arapdepth_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error{}: {message}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Parse { path: PathBuf, offset: Option<u64>, message: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<AppError>,
    },
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io { path: path.to_path_buf(), source }
    }

    pub fn parse(path: &Path, offset: u64, message: impl Into<String>) -> Self {
        AppError::Parse { path: path.to_path_buf(), offset: Some(offset), message: message.into() }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        AppError::Context { context: context.into(), source: Box::new(self) }
    }

    /// Process exit status: 1 input or configuration problem, 2 numerical
    /// failure, 3 unusable depth prior.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Context { source, .. } => source.exit_code(),
            AppError::Core(e) => match e.root() {
                CoreError::NumericalFailure { .. } | CoreError::NonFiniteCost(..) => 2,
                CoreError::UnusablePrior { .. } => 3,
                _ => 1,
            },
            _ => 1,
        }
    }
}
