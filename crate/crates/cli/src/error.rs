use std::path::{Path, PathBuf};

use homodecouple::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 2: configuration or input, 3: numeric regime, 4: fit or solver,
    /// 1: anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                CoreError::InvalidParameter(_) | CoreError::Json(_) => 2,
                CoreError::Regime(_)
                | CoreError::BranchCut { .. }
                | CoreError::ZeroZeeman
                | CoreError::NotHermitian { .. }
                | CoreError::NotUnitary { .. }
                | CoreError::ComplexExpectation { .. } => 3,
                CoreError::Fit(_) | CoreError::RankDeficient { .. } | CoreError::Solver(_) => 4,
                CoreError::Io(_) => 1,
            },
        }
    }
}
