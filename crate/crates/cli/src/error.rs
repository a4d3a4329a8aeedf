use std::path::PathBuf;

use dpclip_core::accountant::AccountantError;
use dpclip_core::harness::HarnessError;
use dpclip_core::planner::PlanError;
use dpclip_core::{ClipOptError, ConfigError, DpError};
use thiserror::Error;

use crate::gradfile::GradFileError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    GradFile(#[from] GradFileError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<AccountantError> for CliError {
    fn from(e: AccountantError) -> Self {
        match e {
            AccountantError::CalibrationFailed { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Accountant(a) => a.into(),
            HarnessError::Config(c) => c.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ClipOptError> for CliError {
    fn from(e: ClipOptError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DpError> for CliError {
    fn from(e: DpError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<dpclip_core::diagnostics::DiagnosticsError> for CliError {
    fn from(e: dpclip_core::diagnostics::DiagnosticsError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("json: {e}"))
    }
}
