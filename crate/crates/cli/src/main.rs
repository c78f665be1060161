//! `pot`: calibrate, diagnose, risk, compare and backtest.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use pot_core::risk::Method;

use crate::commands::RiskArgs;
use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "pot", version, about = "Joint SPX/VIX transport calibration, risk and hedging backtests")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; the backtest hedges both methods side by side when above 1.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Lr,
    Dr,
    Recalib,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Lr => Method::Lr,
            MethodArg::Dr => Method::Dr,
            MethodArg::Recalib => Method::Recalib,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate to a snapshot; writes model.json and diagnostics.
    Calibrate {
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Rewrite diagnostics of a saved model.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
    },
    /// Sensitivities of payoffs to scenarios.
    Risk {
        #[arg(value_enum)]
        method: MethodArg,
        #[arg(long)]
        model: PathBuf,
        /// Scenario JSON (one object or a list).
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        payoffs: Option<PathBuf>,
    },
    /// Side-by-side values of two risk.csv files.
    Compare { a: PathBuf, b: PathBuf },
    /// Synthetic hedging backtest, POT against the decoupled benchmark.
    Backtest,
}

fn run(cli: Cli) -> CliResult<()> {
    let config = RunConfig::load(cli.config.as_deref())?;
    let out = commands::out_dir(cli.out.as_deref(), &config);
    match cli.command {
        Command::Calibrate { snapshot } => commands::cmd_calibrate(&config, snapshot.as_deref(), &out),
        Command::Diagnose { model } => commands::cmd_diagnose(&model, &out),
        Command::Risk { method, model, scenario, payoffs } => commands::cmd_risk(
            &config,
            RiskArgs { method: method.into(), model: &model, scenario: scenario.as_deref(), payoffs: payoffs.as_deref() },
            &out,
        ),
        Command::Compare { a, b } => commands::cmd_compare(&a, &b, &out),
        Command::Backtest => commands::cmd_backtest(&config, cli.seed, cli.threads as usize, &out),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POT_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
