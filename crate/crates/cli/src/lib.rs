//! Configuration-driven runs: corpus generation, training, evaluation,
//! sampling, benchmarking and gradient checking.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numeric(_) => 3,
            Self::Io(_) => 4,
        }
    }
}

impl From<manta_core::Error> for CliError {
    fn from(e: manta_core::Error) -> Self {
        use manta_core::Error as E;
        match e {
            E::NonFinite(_) => Self::Numeric(e.to_string()),
            E::Io(_) | E::Format { .. } => Self::Io(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}
