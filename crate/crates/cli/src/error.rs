//! Pipeline errors mapped onto process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("report error: {0}")]
    Report(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Stage(String),
}

impl CliError {
    /// 0 success, 2 config error, 3 dependency error, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<divrec_core::data::DataError> for CliError {
    fn from(e: divrec_core::data::DataError) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<divrec_core::prompt::PromptError> for CliError {
    fn from(e: divrec_core::prompt::PromptError) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<divrec_core::attrs::AttrError> for CliError {
    fn from(e: divrec_core::attrs::AttrError) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<divrec_core::gan::GanError> for CliError {
    fn from(e: divrec_core::gan::GanError) -> Self {
        match e {
            divrec_core::gan::GanError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Stage(other.to_string()),
        }
    }
}

impl From<divrec_core::collab::CollabError> for CliError {
    fn from(e: divrec_core::collab::CollabError) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<divrec_core::rec::RecError> for CliError {
    fn from(e: divrec_core::rec::RecError) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<divrec_core::nn::NnError> for CliError {
    fn from(e: divrec_core::nn::NnError) -> Self {
        match e {
            divrec_core::nn::NnError::NonFiniteGrad(_) => CliError::Numeric(e.to_string()),
            other => CliError::Stage(other.to_string()),
        }
    }
}

impl From<divrec_core::metrics::MetricError> for CliError {
    fn from(e: divrec_core::metrics::MetricError) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<divrec_core::diversity::DivError> for CliError {
    fn from(e: divrec_core::diversity::DivError) -> Self {
        CliError::Stage(e.to_string())
    }
}
