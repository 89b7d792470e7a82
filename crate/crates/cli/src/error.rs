use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Run(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<vvcv::error::Error> for CliError {
    fn from(e: vvcv::error::Error) -> Self {
        use vvcv::error::Error as E;
        match e {
            E::InvalidArgument(_)
            | E::DimensionMismatch { .. }
            | E::Unsupported(_)
            | E::Domain(_)
            | E::EmptyTask(_)
            | E::NotPositiveDefinite
            | E::Io(_) => CliError::Config(e.to_string()),
            _ => CliError::Run(e.to_string()),
        }
    }
}
