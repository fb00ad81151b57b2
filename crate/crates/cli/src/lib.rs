//! `spectralds` command line.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on numerical or I/O
//! failures.

mod args;
mod commands;

use std::ffi::OsString;
use std::fmt;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::{Cli, Command};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_FAILURE: u8 = 2;

/// Environment variable capping the worker count; `0` means one worker per
/// core.
pub const THREADS_ENV: &str = "SPECTRALDS_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failure(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl From<spectralds::Error> for CliError {
    fn from(e: spectralds::Error) -> Self {
        match e {
            spectralds::Error::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Failure(other.into()),
        }
    }
}

impl From<spectralds_experiments::BenchError> for CliError {
    fn from(e: spectralds_experiments::BenchError) -> Self {
        use spectralds_experiments::BenchError;
        match e {
            BenchError::Config(m) => CliError::Usage(m),
            BenchError::Core(c) => c.into(),
            other => CliError::Failure(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Failure(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Worker count from `--threads`, else the environment, else automatic.
fn thread_count(flag: Option<usize>) -> CliResult<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a non-negative integer"))),
        Err(_) => Ok(0),
    }
}

fn init_threads(n: usize) -> CliResult<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failure(e.into()))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let result = thread_count(cli.threads).and_then(init_threads).and_then(|_| commands::dispatch(cli.command));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}
