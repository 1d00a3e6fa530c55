//! Dataset ingestion, train/eval loops and checkpoint persistence.

pub mod checkpoint;
pub mod dataset;
pub mod runner;

use std::path::PathBuf;

use thiserror::Error;

use crate::controller::ControllerError;
use crate::embedding::EmbeddingError;
use crate::executor::{Checker, Environment, ExecError, LiveEnvironment, SyntheticEnvironment};
use crate::executor::live::ChatClient;
use crate::optimizer::{LlmMutator, MockMutator, Mutator, MutatorKind, OptimError};
use crate::registry::RegistryError;
use crate::sampler::SamplerError;

pub use checkpoint::{Checkpoint, MetricsSummary, FORMAT_VERSION};
pub use dataset::{load_dataset, parse_dataset, split_dataset};
pub use runner::{
    eval_records, inspect, run_eval, run_train, sample_query, train_records, EvalReport, EvalRun,
    EvalSplit, InspectReport, LayerSummary, QueryOutcome, TrainOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("duplicate query id `{0}`")]
    DuplicateQueryId(String),
    #[error("need at least 5 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    Usage,
    Data,
    Backend,
}

impl HarnessError {
    pub fn class(&self) -> FailureClass {
        match self {
            HarnessError::Exec(ExecError::BackendUnavailable { .. })
            | HarnessError::Exec(ExecError::MalformedResponse(_))
            | HarnessError::Optim(OptimError::Exec(ExecError::BackendUnavailable { .. }))
            | HarnessError::Optim(OptimError::Exec(ExecError::MalformedResponse(_)))
            | HarnessError::Optim(OptimError::MutatorUnavailable(_))
            | HarnessError::Optim(OptimError::Embedding(EmbeddingError::RemoteUnavailable(_)))
            | HarnessError::Embedding(EmbeddingError::RemoteUnavailable(_)) => FailureClass::Backend,
            HarnessError::Optim(OptimError::InvalidConfig(_)) => FailureClass::Usage,
            _ => FailureClass::Data,
        }
    }
}

/// Which backend executes operators.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    Synthetic { profiles: PathBuf },
    /// Chat model at `MAAS_BASE_URL`.
    Live { checker: Checker },
}

impl EnvSpec {
    pub fn build(&self) -> Result<Box<dyn Environment>, HarnessError> {
        match self {
            EnvSpec::Synthetic { profiles } => Ok(Box::new(SyntheticEnvironment::from_file(profiles)?)),
            EnvSpec::Live { checker } => {
                Ok(Box::new(LiveEnvironment::new(ChatClient::from_env()?, *checker)))
            }
        }
    }
}

/// `None` for [`MutatorKind::None`]; the LLM mutator reads the chat
/// endpoint from the environment.
pub fn build_mutator(kind: MutatorKind, model: &str) -> Result<Option<Box<dyn Mutator>>, HarnessError> {
    Ok(match kind {
        MutatorKind::None => None,
        MutatorKind::Mock => Some(Box::new(MockMutator)),
        MutatorKind::Llm => Some(Box::new(LlmMutator::new(ChatClient::from_env()?, model))),
    })
}
