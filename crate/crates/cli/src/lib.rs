//! Library half of the `fewner` command-line tool: configuration layering,
//! the subcommands, the resumable experiment driver and the ablation harness.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod pipeline;

/// Bad invocation: the process exits with status 1 rather than 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
