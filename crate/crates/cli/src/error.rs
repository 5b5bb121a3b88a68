use std::path::{Path, PathBuf};

use thiserror::Error;

/// Command failure, classified by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configs or source data. Exit code 2.
    #[error("{0}")]
    Input(String),

    /// A checkpoint, statistics file or embedding archive is absent. Exit code 3.
    #[error("missing artifact {}: {reason}", path.display())]
    MissingArtifact { path: PathBuf, reason: String },

    /// Training or sampling produced non-finite values. Exit code 4.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Anything else, including write failures. Exit code 1.
    #[error(transparent)]
    Other(#[from] dymesh_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    /// Maps a core error raised while reading user-provided data.
    pub fn from_input(context: &str, e: dymesh_core::Error) -> Self {
        use dymesh_core::Error as E;
        match e {
            E::Numerical(m) => CliError::Numerical(m),
            other => CliError::Input(format!("{context}: {other}")),
        }
    }

    /// Maps a core error raised while loading a trained artifact.
    pub fn from_artifact(path: &Path, e: dymesh_core::Error) -> Self {
        use dymesh_core::Error as E;
        match e {
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::MissingArtifact {
                path: path.to_owned(),
                reason: "not found".into(),
            },
            E::Numerical(m) => CliError::Numerical(m),
            other => CliError::Input(format!("{}: {other}", path.display())),
        }
    }
}

/// Training and sampling errors keep their numerical classification; the
/// rest are passed through.
pub(crate) fn classify(e: dymesh_core::Error) -> CliError {
    match e {
        dymesh_core::Error::Numerical(m) => CliError::Numerical(m),
        dymesh_core::Error::Config(m) => CliError::Input(format!("configuration: {m}")),
        other => CliError::Other(other),
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(dymesh_core::Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    )))
}
