//! Command-line driver: scenario configuration, experiment commands, CSV
//! emission. Exit codes: 0 success, 1 numerical failure, 2 configuration
//! error.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::Overrides;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

#[derive(Parser)]
#[command(
    name = "geomint",
    version,
    about = "Structure-preserving integrators for constrained mechanics and optimal control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario file with one `key = value` per line; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in system name; overrides the config file.
    #[arg(long)]
    system: Option<String>,
    /// Quadrature weight of the discrete scheme, in [0, 1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Time step.
    #[arg(long = "h")]
    h: Option<f64>,
    /// Step count.
    #[arg(long)]
    steps: Option<usize>,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tolerance of the command's main check.
    #[arg(long)]
    tol: Option<f64>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            config: self.config.clone(),
            system: self.system.clone(),
            alpha: self.alpha,
            h: self.h,
            steps: self.steps,
            out: self.out.clone(),
            tol: self.tol,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one integrator and emit per-step diagnostics as CSV.
    Simulate(CommonArgs),
    /// Run the discrete scheme and RK4 from identical data and compare
    /// their energy errors.
    CompareEnergy(CommonArgs),
    /// Self-convergence study across halved step sizes.
    Convergence(CommonArgs),
    /// Composition-law verification for the configured system.
    Verify(CommonArgs),
}

type CommandFn = fn(&config::ScenarioConfig) -> Result<(), CliError>;

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let (args, run): (&CommonArgs, CommandFn) = match &cli.command {
        Command::Simulate(a) => (a, commands::simulate),
        Command::CompareEnergy(a) => (a, commands::compare_energy),
        Command::Convergence(a) => (a, commands::convergence),
        Command::Verify(a) => (a, commands::verify),
    };
    let scenario = config::resolve(&args.overrides())?;
    run(&scenario)
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let code = match dispatch(&cli) {
        Ok(()) => 0,
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            2
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    };
    std::process::exit(code);
}
