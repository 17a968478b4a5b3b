//! Library surface of the command-line driver, so integration tests can run
//! the commands in-process.

pub mod commands;
pub mod config;

/// Command failures carry the process exit code: 1 usage, 2 data, 3 numeric.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<mixmatch::data::DataError> for CliError {
    fn from(e: mixmatch::data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<mixmatch::quaternion::KinematicsError> for CliError {
    fn from(e: mixmatch::quaternion::KinematicsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<mixmatch::model::ModelError> for CliError {
    fn from(e: mixmatch::model::ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<mixmatch::training::TrainError> for CliError {
    fn from(e: mixmatch::training::TrainError) -> Self {
        match e {
            mixmatch::training::TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            mixmatch::training::TrainError::BadConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<mixmatch::metrics::MetricsError> for CliError {
    fn from(e: mixmatch::metrics::MetricsError) -> Self {
        match e {
            mixmatch::metrics::MetricsError::Train(inner) => (*inner).into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
