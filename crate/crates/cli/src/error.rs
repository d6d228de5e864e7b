use std::path::{Path, PathBuf};

use longsum_core::datapipe::DataError;
use longsum_core::evalkit::EvalError;
use longsum_core::models::ModelError;
use longsum_core::tensor::CheckpointError;
use longsum_core::tokenizer::TokenizerError;
use longsum_core::training::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Schema(_) => "schema",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Schema(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }

    /// `error kind=<kind> message=<json string>` on a single line.
    pub fn line(&self) -> String {
        let msg = serde_json::to_string(&self.to_string()).expect("string serialises");
        format!("error kind={} message={msg}", self.kind())
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => CliError::Io {
                path,
                message: source.to_string(),
            },
            DataError::Schema { .. } | DataError::Lexicon(_) | DataError::Csv(_) => {
                CliError::Schema(e.to_string())
            }
            DataError::Invalid(m) => CliError::Runtime(m),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::Runtime(e.to_string()),
            CheckpointError::Format(_) => CliError::Schema(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint(c) => c.into(),
            ModelError::Config(m) => CliError::Schema(format!("model config: {m}")),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::Format(_) => CliError::Schema(e.to_string()),
            TokenizerError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Config(m) => CliError::Usage(format!("training config: {m}")),
            TrainError::Split(m) => CliError::Runtime(format!("split: {m}")),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Data(d) => d.into(),
            EvalError::Csv(_) | EvalError::Annotation { .. } | EvalError::Incomplete { .. } => {
                CliError::Schema(e.to_string())
            }
            EvalError::Invalid(m) => CliError::Runtime(m),
        }
    }
}
