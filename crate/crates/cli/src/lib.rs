//! Command implementations behind the `udslab` binary: experiment runs with
//! CSV/PPM output, the oracle verification table and trace analysis.

use std::fmt;

use udslab::LabError;

pub mod config;
pub mod experiment;
pub mod output;
pub mod trace;
pub mod verify;

/// A problem with the configuration, the command line or the input files.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// `udslab verify` found a failing check.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyFailed(pub Vec<String>);

impl fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "failing checks: {}", self.0.join(", "))
    }
}

impl std::error::Error for VerifyFailed {}

pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Process exit status for an error returned by a command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<VerifyFailed>().is_some() {
        return EXIT_VERIFY_FAILED;
    }
    match err.downcast_ref::<LabError>() {
        Some(LabError::RunAborted { .. } | LabError::NonFinite(_) | LabError::TrainingDiverged { .. }) => {
            EXIT_NUMERICAL
        }
        _ => EXIT_CONFIG,
    }
}
