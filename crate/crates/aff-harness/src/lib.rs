//! Experiment configuration, the comparative runner, and report emission.

pub mod config;
pub mod runner;

use std::fmt;

/// Harness failures, grouped by the process exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad or unreadable configuration (exit 2).
    Config(String),
    /// Filesystem trouble while reading inputs or writing outputs (exit 2).
    Io(#[from] std::io::Error),
    /// Numerical failure during training, evaluation, or checking (exit 3).
    Numerical(#[from] aff_core::Error),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(msg) => write!(f, "config error: {msg}"),
            HarnessError::Io(e) => write!(f, "io error: {e}"),
            HarnessError::Numerical(e) => write!(f, "numerical failure: {e}"),
        }
    }
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io(_) => 2,
            HarnessError::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
