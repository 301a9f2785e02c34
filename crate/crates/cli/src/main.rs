use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use platoon_cli::commands::{cmd_compare, cmd_fit_pi, cmd_run, cmd_sweep};
use platoon_cli::config::load_config;
use platoon_cli::CliError;

/// Moving-bottleneck traffic control experiments.
#[derive(Parser)]
#[command(name = "platoon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file; reference defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Controller: none, gn_lqr, gn_lqrp, pi or mpc.
    #[arg(long, global = true)]
    controller: Option<String>,

    /// Configuration override, e.g. `controller.horizon=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation and export its results.
    Run,
    /// Run the configured parameter sweep.
    Sweep,
    /// Compare all controllers on the configured scenario.
    Compare,
    /// Fit PI gains by maximizing the mean speed.
    FitPi,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref(), cli.controller.as_deref(), &cli.set)?;
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    match cli.command {
        Command::Run => cmd_run(&cfg).map(drop),
        Command::Sweep => cmd_sweep(&cfg).map(drop),
        Command::Compare => cmd_compare(&cfg).map(drop),
        Command::FitPi => cmd_fit_pi(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut shown = e.to_string();
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let msg = s.to_string();
                if !shown.contains(&msg) {
                    eprintln!("  caused by: {msg}");
                }
                shown = msg;
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
