use std::path::PathBuf;

use memoctrl::kernels::KernelError;
use memoctrl::{HumError, ParabolicError, RankError, VolterraError};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("rank test inconclusive: {0}")]
    Inconclusive(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Input { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Inconclusive(_) => 4,
            CliError::Output { .. } => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Input { .. } => "input",
            CliError::Output { .. } => "output",
            CliError::Numerical(_) => "numerical",
            CliError::Inconclusive(_) => "inconclusive",
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            error: self.kind(),
            detail: self.to_string(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub detail: String,
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<VolterraError> for CliError {
    fn from(e: VolterraError) -> Self {
        match e {
            VolterraError::SingularStep { .. } | VolterraError::Divergence { .. } => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::Inapplicable { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RankError> for CliError {
    fn from(e: RankError) -> Self {
        match e {
            RankError::Inapplicable(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<HumError> for CliError {
    fn from(e: HumError) -> Self {
        match e {
            HumError::Solver(v) => v.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ParabolicError> for CliError {
    fn from(e: ParabolicError) -> Self {
        match e {
            ParabolicError::Kernel(k) => k.into(),
            ParabolicError::System(v) => v.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}
