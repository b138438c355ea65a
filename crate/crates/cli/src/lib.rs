//! File formats, dataset IO, and the command-line front end for
//! [`idnanet_core`].

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

/// Bad arguments, configuration, or input; maps to exit code 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Exit code for an error: usage and config problems are `1`, everything else `2`.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<idnanet_core::Error>() {
        Some(idnanet_core::Error::Usage(_) | idnanet_core::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}
