//! Command-line front end: input readers, run directories, evaluation,
//! export and the branch/distortion ablation sweep.
//!
//! Exit codes: 0 success, 1 output failure, 2 unreadable or malformed
//! input, 3 bad configuration or checkpoint, 4 non-finite training state.

pub mod commands;
pub mod io;

pub use commands::*;

pub const EXIT_OUTPUT: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;

/// Environment variable holding the log filter (`error` … `trace`).
pub const LOG_ENV: &str = "CYCLEMAP_LOG";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    NonFinite(String),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Output(_) => EXIT_OUTPUT,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::NonFinite(_) => EXIT_NON_FINITE,
        }
    }
}
