//! Command-line front end: argument parsing, subcommand dispatch and exit codes.

pub mod approx;
pub mod bench;
pub mod config;
pub mod history;
pub mod simulate;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub const THREADS_ENV: &str = "AMPHASE_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Validation(_) => 2,
            Self::Runtime(_) => 3,
        }
    }

    pub(crate) fn io(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        Self::Runtime(format!("{context}: {err}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "amphase", version, about = "Phase-fraction kinetics and thermal build simulation")]
pub struct Cli {
    /// Worker threads; defaults to $AMPHASE_THREADS, then to all cores.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a coupled thermal and microstructure build.
    Simulate(simulate::Args),
    /// Integrate the kinetics along a prescribed temperature history.
    IntegrateHistory(history::Args),
    /// Measure kinetics throughput and write a roofline report.
    Bench(bench::Args),
    /// Sweep the error of the fast exp/ln/pow approximations.
    ApproxCheck(approx::Args),
}

/// Output file or standard output.
pub(crate) fn open_output(path: Option<&PathBuf>) -> Result<Box<dyn std::io::Write>, CliError> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
            }
            let f = std::fs::File::create(p).map_err(|e| CliError::io(p.display(), e))?;
            Ok(Box::new(std::io::BufWriter::new(f)))
        }
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    // a second configuration in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Simulate(a) => simulate::run(&a),
        Command::IntegrateHistory(a) => history::run(&a),
        Command::Bench(a) => bench::run(&a),
        Command::ApproxCheck(a) => approx::run(&a),
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
