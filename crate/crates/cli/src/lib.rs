//! Command-line driver for distributed scenario MPC experiments.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] dsmpc::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Process exit status: 2 usage or configuration, 3 infeasible, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        use dsmpc::Error as E;
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Infeasible { .. } | E::SubproblemInfeasible { .. } | E::EmptyTightenedSet { .. } => 3,
                E::Numerical(_) | E::Codec(_) | E::Protocol(_) => 4,
                _ => 2,
            },
        }
    }

    /// Machine-readable description printed on failure.
    pub fn diagnostic(&self) -> serde_json::Value {
        let kind = match self.exit_code() {
            3 => "infeasible",
            4 => "numerical",
            _ => "config",
        };
        let mut v = serde_json::json!({ "error": kind, "message": self.to_string() });
        if let CliError::Core(dsmpc::Error::Infeasible { step, attempts }) = self {
            v["step"] = (*step).into();
            v["attempts"] = (*attempts).into();
        }
        v
    }
}
