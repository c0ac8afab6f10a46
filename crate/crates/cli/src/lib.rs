//! Driver library behind the `gcm` binary.
//!
//! Every subcommand is a plain function here so tests can call it without a
//! subprocess.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod export;
pub mod gradsuite;
pub mod train;

use std::fmt;

pub use config::{RunConfig, Variant};

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Missing, unreadable or malformed inputs (exit 2).
    Data(String),
    /// Non-finite values or a failed gradient check (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<gcm_core::Error> for CliError {
    fn from(e: gcm_core::Error) -> Self {
        use gcm_core::Error as E;
        match e {
            E::NonFinite { .. } | E::NonFiniteGradient { .. } => CliError::Numerical(e.to_string()),
            E::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Sizes the global rayon pool once; later calls keep the first size.
pub fn init_threads(n: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
}
