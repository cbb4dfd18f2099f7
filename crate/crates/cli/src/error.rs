use std::process::ExitCode;

use thiserror::Error;
use vqarank::dataset::DatasetError;
use vqarank::evaluation::EvalError;
use vqarank::formats::FormatError;
use vqarank::question_generation::QuestionGenError;
use vqarank::RerankError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::NotFound(_) => 2,
            CliError::Backend(_) => 3,
        })
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RerankError> for CliError {
    fn from(e: RerankError) -> Self {
        match e {
            RerankError::BackendUnavailable(_) => CliError::Backend(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::AnnotatorUnavailable(_) => CliError::Backend(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<QuestionGenError> for CliError {
    fn from(e: QuestionGenError) -> Self {
        match e {
            QuestionGenError::Template(_) => CliError::Usage(e.to_string()),
            QuestionGenError::EmptyCorpus => CliError::Data(e.to_string()),
            // Unusable output after every retry is the backend's failure.
            other => CliError::Backend(other.to_string()),
        }
    }
}
