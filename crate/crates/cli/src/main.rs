use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use iceot::{execute, CliError, Command, RunConfig, EXIT_OK, EXIT_RUN_FAILURE, EXIT_USAGE};
use iceot_core::convexity::ToyFn;
use iceot_core::nn::Architecture;

#[derive(Parser, Debug)]
#[command(name = "iceot", version, about = "Input-convex surrogates and building MPC")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Worker threads for sweep and bench cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn toy_fn(s: &str) -> Result<ToyFn, String> {
    ToyFn::parse(s).ok_or_else(|| format!("unknown function `{s}` (expected f1, f2 or f3)"))
}

fn arch(s: &str) -> Result<Architecture, String> {
    Architecture::parse(s).ok_or_else(|| {
        format!("unknown architecture `{s}` (expected iceot, iclstm, eot, lstm, icfnn or icrnn)")
    })
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Fit a toy surface and dump the report and prediction grid.
    FitSurface {
        #[arg(long, value_parser = toy_fn)]
        function: ToyFn,
        #[arg(long, value_parser = arch)]
        arch: Architecture,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate the plant under random excitation and write the dataset.
    GenData(Common),
    /// Run two-stage MI / Pearson feature selection.
    SelectFeatures(Common),
    /// Train building surrogates and write checkpoints.
    Train(Common),
    /// Train every (architecture, sequence length) cell and log telemetry.
    StabilitySweep(Common),
    /// One closed-loop day under MPC and under the fixed baseline.
    MpcRun(Common),
    /// Closed-loop days over a range of horizons per model.
    BenchSolver(Common),
    /// Midpoint-convexity probes of trained building surrogates.
    VerifyConvexity(Common),
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let (command, common) = match cli.command {
        Cmd::FitSurface { function, arch, common } => (Command::FitSurface { function, arch }, common),
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::SelectFeatures(c) => (Command::SelectFeatures, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::StabilitySweep(c) => (Command::StabilitySweep, c),
        Cmd::MpcRun(c) => (Command::MpcRun, c),
        Cmd::BenchSolver(c) => (Command::BenchSolver, c),
        Cmd::VerifyConvexity(c) => (Command::VerifyConvexity, c),
    };
    let config = RunConfig::load(&common.config)?;
    let outcome = execute(command, &config, common.jobs)?;
    eprintln!(
        "{}: {} artifacts in {}",
        command.name(),
        outcome.manifest.artifacts.len(),
        outcome.dir.display()
    );
    Ok(match outcome.failure {
        Some(msg) => {
            eprintln!("error: {msg}");
            EXIT_RUN_FAILURE
        }
        None => EXIT_OK,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::from(EXIT_OK as u8),
                _ => ExitCode::from(EXIT_USAGE as u8),
            };
        }
    };
    let code = run(cli).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_code()
    });
    ExitCode::from(code as u8)
}
