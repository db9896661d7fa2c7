use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dsmpc_cli::commands::{self, BoundsArgs, Common};
use dsmpc_cli::CliError;

/// Distributed scenario-based stochastic MPC experiments.
#[derive(Parser, Debug)]
#[command(name = "dsmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print scenario sample counts and budget splits.
    Bounds(BoundsArgs),
    /// Simulate the closed loop and write traces and summaries.
    Run(Common),
    /// Estimate violation probabilities and compare controllers.
    Validate(Common),
    /// Plug a fourth room in and out during a closed-loop run.
    Plugdemo(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DSMPC_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bounds(args) => commands::bounds(args).map(|table| print!("{table}")),
        Command::Run(c) => commands::run(c).map(report),
        Command::Validate(c) => commands::validate(c).map(report),
        Command::Plugdemo(c) => commands::plugdemo(c).map(report),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn report(paths: Vec<std::path::PathBuf>) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("error: {e}");
    println!("{}", e.diagnostic());
    ExitCode::from(e.exit_code() as u8)
}
