//! `sitefleet`: scenario runs, the degree study, service roles, and a
//! client for a running coordinator.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input.

mod remote;
mod run;
mod serve;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::filter::LevelFilter;

#[derive(Debug, Parser)]
#[command(name = "sitefleet", version, about = "Construction-site fleet coordination")]
struct Cli {
    /// Log verbosity on stderr: off, error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: LevelFilter,

    /// Coordinator API root for the client commands.
    #[arg(long, global = true, default_value = "http://127.0.0.1:8080", env = "SITEFLEET_API")]
    api: String,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a scenario in one process and print its metrics report.
    Run(run::RunArgs),
    /// Held-out RMSE per polynomial degree and altitude, as CSV.
    DegreeStudy(run::StudyArgs),
    /// Start the broker, coordinator, simulator, or all three.
    Serve(serve::ServeArgs),
    #[command(flatten)]
    Remote(remote::RemoteCmd),
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn runtime(message: impl fmt::Display) -> Self {
        Self { code: 1, message: message.to_string() }
    }

    pub fn invalid(message: impl fmt::Display) -> Self {
        Self { code: 2, message: message.to_string() }
    }
}

pub type CliResult = Result<(), Failure>;

pub fn read_path(path: &PathBuf) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(cli.log_level).with_target(false).init();
    let result = match cli.command {
        Cmd::Run(args) => run::run(args),
        Cmd::DegreeStudy(args) => run::degree_study(args),
        Cmd::Serve(args) => runtime().and_then(|rt| rt.block_on(serve::serve(args))),
        Cmd::Remote(cmd) => runtime().and_then(|rt| rt.block_on(remote::execute(&cli.api, cmd))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(Failure::runtime)
}
