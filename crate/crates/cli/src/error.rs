use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {0}: run `{1}` first")]
    Dependency(String, &'static str),
    #[error("service error: {0}")]
    Service(String),
    #[error(transparent)]
    Core(#[from] spectromind::Error),
    #[error(transparent)]
    Recon(#[from] spectromind_recon::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use spectromind::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(..) => 3,
            CliError::Service(_) => 5,
            CliError::Core(e) => match e {
                E::Parameter(_) | E::Argument(_) | E::Stratification(_) | E::Design(_) | E::Budget { .. } => 2,
                E::Dependency(_) => 3,
                _ => 4,
            },
            CliError::Recon(e) => match e {
                spectromind_recon::Error::Argument(_) => 2,
                spectromind_recon::Error::Io { .. } | spectromind_recon::Error::Json(_) => 4,
                _ => 5,
            },
        }
    }

    pub fn missing(path: &Path, stage: &'static str) -> Self {
        CliError::Dependency(path.display().to_string(), stage)
    }
}

pub type CliResult<T> = Result<T, CliError>;
