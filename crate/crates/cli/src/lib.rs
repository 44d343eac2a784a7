//! `featprobe` command-line front end.
//!
//! Commands return a [`CommandOutput`] holding one JSON document plus a
//! human-readable summary; `main` decides which of the two reaches stdout.

pub mod args;
pub mod commands;
pub mod config;

use std::fmt;

use featprobe_core::{Error, ErrorClass};
use serde_json::Value;

pub use args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
/// Gradient check ran but at least one check failed.
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_ESTIMATION: i32 = 4;
pub const EXIT_TRAINING: i32 = 5;

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Io => EXIT_IO,
        ErrorClass::Estimation => EXIT_ESTIMATION,
        ErrorClass::Training => EXIT_TRAINING,
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
    /// Document still emitted on failure (e.g. an all-failed report).
    pub output: Option<Box<CommandOutput>>,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
            output: None,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: exit_code(e.class()),
            message: e.to_string(),
            output: None,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub json: Value,
    pub human: String,
    /// Non-zero when the command finished but reports a failure.
    pub code: i32,
}

impl CommandOutput {
    pub fn ok(json: Value, human: String) -> Self {
        CommandOutput {
            json,
            human,
            code: EXIT_OK,
        }
    }
}

/// Runs a parsed command inside a pool of `cli.jobs` workers.
pub fn run(cli: &Cli) -> CliResult<CommandOutput> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::config("--jobs must be >= 1"));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| commands::dispatch(cli))
}

/// Parses `argv`, runs, prints, and returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let emit = |out: &CommandOutput| {
        if cli.json {
            println!("{}", serde_json::to_string_pretty(&out.json).expect("json"));
        } else if !out.human.is_empty() {
            print!("{}", out.human);
        }
    };
    match run(&cli) {
        Ok(out) => {
            emit(&out);
            out.code
        }
        Err(e) => {
            if let Some(out) = &e.output {
                emit(out);
            }
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
