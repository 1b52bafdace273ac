use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    /// A stage needs an artifact that was not supplied.
    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("startup error: {0}")]
    Startup(String),

    #[error("refusing to overwrite {} (pass --force)", .0.display())]
    Exists(PathBuf),

    #[error(transparent)]
    Core(mtlb_core::Error),
}

impl From<mtlb_core::Error> for CliError {
    fn from(e: mtlb_core::Error) -> Self {
        use mtlb_core::Error as E;
        match e {
            E::Config(m) => Self::Config(m),
            E::Input(m) => Self::Input(m),
            E::Startup(m) => Self::Startup(m),
            other => Self::Core(other),
        }
    }
}

impl CliError {
    /// Process exit status; 0 is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(_) => 1,
            Self::Config(_) => 2,
            Self::Dependency(_) => 3,
            Self::Input(_) => 4,
            Self::Startup(_) => 5,
            Self::Exists(_) => 6,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
