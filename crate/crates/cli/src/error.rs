use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("stage {stage}: {source}")]
    Core {
        stage: &'static str,
        #[source]
        source: mmrec_core::Error,
    },
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Compatibility(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core { source, .. } => source.category(),
            CliError::Config(_) => "config",
            CliError::File { .. } => "file",
            CliError::Compatibility(_) => "compatibility",
            CliError::Usage(_) => "usage",
        }
    }

    /// `error[<category>]: <message>` on a single line.
    pub fn line(&self) -> String {
        let msg = self.to_string();
        let flat: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        format!("error[{}]: {}", self.category(), flat.join("; "))
    }
}

pub fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Attaches a stage name to core errors.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for mmrec_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| CliError::Core { stage, source })
    }
}
