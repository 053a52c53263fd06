use std::path::{Path, PathBuf};

use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Input { path: PathBuf, source: hmm_order::Error },

    #[error("{0}")]
    Core(#[from] hmm_order::Error),

    #[error("selected fit did not converge: {0}")]
    NotConverged(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn input(path: &Path, source: hmm_order::Error) -> Self {
        match source {
            hmm_order::Error::Io(e) => Self::io(path, e),
            source => Self::Input {
                path: path.to_path_buf(),
                source,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        use hmm_order::Error as E;
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Io { .. } => EXIT_IO,
            Self::NotConverged(_) => EXIT_CONVERGENCE,
            Self::Input { source, .. } | Self::Core(source) => match source {
                E::Config(_) | E::Dimension(_) => EXIT_CONFIG,
                E::Parse { .. } | E::Csv(_) | E::Json(_) | E::InvalidData(_) => EXIT_PARSE,
                E::Io(_) => EXIT_IO,
                E::Numeric(_) | E::Underflow { .. } | E::Singular(_) | E::Domain(_) | E::Convergence(_) | E::Fitting(_) => {
                    EXIT_CONVERGENCE
                }
            },
        }
    }
}
