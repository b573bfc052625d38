//! Front end for the `holdsim` library: TOML configuration schema, report
//! and manifest writers, and the error-to-exit-code mapping used by the
//! binary.
//!
//! The binary exits with
//!
//!   0  success,
//!   2  configuration or argument parse failure,
//!   3  a failed numerical assertion (check below tolerance, aborted sweep),
//!   4  I/O failure.

use std::fmt;

pub mod config;
pub mod report;

/// Top-level error carried out of every verb; each variant owns its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration file or command line (exit 2).
    Parse(String),
    /// A numerical check or sweep failed its contract (exit 3).
    Assertion(String),
    /// Filesystem trouble reading configs or writing reports (exit 4).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Assertion(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Parse(msg) => write!(f, "{msg}"),
            CliError::Assertion(msg) => write!(f, "{msg}"),
            CliError::Io(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}
