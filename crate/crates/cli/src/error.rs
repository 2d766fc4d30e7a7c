use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("self-check failed: {0}")]
    SelfCheck(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(quadapter::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl From<quadapter::Error> for CliError {
    fn from(e: quadapter::Error) -> Self {
        use quadapter::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Data(m) => CliError::Data(m),
            E::Training(_) | E::NonFinite(_) => CliError::Training(e.to_string()),
            E::SelfCheck(m) => CliError::SelfCheck(m),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
            CliError::SelfCheck(_) => 5,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}
