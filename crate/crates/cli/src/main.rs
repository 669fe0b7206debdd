//! `memoctrl <command> --config <file.json> [--out-dir <dir>]`
//!
//! Exit codes: 0 success, 1 output not writable, 2 invalid input,
//! 3 numerical failure, 4 inconclusive rank test.

mod commands;
mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::commands::Outputs;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "memoctrl", version, about = "Null controllability of linear systems with memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward solve; writes trajectory.csv and summary.json.
    Simulate(RunArgs),
    /// Adjoint solve; writes adjoint.csv and summary.json with w(0).
    Adjoint(RunArgs),
    /// Algebraic rank test; writes rank_report.json.
    CheckRank(RunArgs),
    /// Control synthesis; writes control.csv and synthesis.json.
    Synthesize(RunArgs),
    /// Heat equation with a moving window; writes system.json,
    /// coverage.json, control.csv and synthesis.json.
    Parabolic(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Adjoint(_) => "adjoint",
            Command::CheckRank(_) => "check-rank",
            Command::Synthesize(_) => "synthesize",
            Command::Parabolic(_) => "parabolic",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::Adjoint(a)
            | Command::CheckRank(a)
            | Command::Synthesize(a)
            | Command::Parabolic(a) => a,
        }
    }

    fn run(&self) -> Result<Outputs, CliError> {
        let path = &self.args().config;
        match self {
            Command::Simulate(_) => commands::simulate(path),
            Command::Adjoint(_) => commands::adjoint(path),
            Command::CheckRank(_) => commands::check_rank(path),
            Command::Synthesize(_) => commands::synthesize(path),
            Command::Parabolic(_) => commands::parabolic(path),
        }
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    config: String,
    version: &'static str,
    started_unix: u64,
    elapsed_seconds: f64,
    files: Vec<&'a str>,
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| CliError::Output { path, source })
}

fn write_outputs(cmd: &Command, out: &Outputs, started: SystemTime, clock: Instant) -> Result<(), CliError> {
    let dir = &cmd.args().out_dir;
    fs::create_dir_all(dir).map_err(|source| CliError::Output {
        path: dir.clone(),
        source,
    })?;
    for (name, bytes) in &out.files {
        write_file(dir, name, bytes)?;
    }
    let meta = RunMeta {
        command: cmd.name(),
        config: cmd.args().config.display().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        started_unix: started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        elapsed_seconds: clock.elapsed().as_secs_f64(),
        files: out.files.iter().map(|(n, _)| n.as_str()).collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    bytes.push(b'\n');
    write_file(dir, "run.meta.json", &bytes)
}

fn fail(err: &CliError) -> ExitCode {
    log::error!("{err}");
    println!("{}", serde_json::to_string(&err.report()).expect("error report serializes"));
    ExitCode::from(err.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MEMOCTRL_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Validation(e.to_string())),
    };
    let started = SystemTime::now();
    let clock = Instant::now();
    let out = match cli.command.run() {
        Ok(out) => out,
        Err(e) => return fail(&e),
    };
    if let Err(e) = write_outputs(&cli.command, &out, started, clock) {
        return fail(&e);
    }
    match &out.status {
        Some(e) => fail(e),
        None => ExitCode::SUCCESS,
    }
}
