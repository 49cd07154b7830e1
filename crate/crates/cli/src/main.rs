use std::path::PathBuf;
use std::process::ExitCode;

use analogcast_core::experiment::{Experiment, ExperimentConfig, StageReport};
use analogcast_core::Result;
use clap::{Parser, Subcommand};

/// Kernel ensemble analog forecasting experiments.
#[derive(Parser)]
#[command(name = "analogcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic records.
    Synth(Args),
    /// Build the kernel eigenbasis and classify its modes.
    Decompose(Args),
    /// Run analog and persistence forecasts on the test period.
    Forecast(Args),
    /// Score every forecast run and tabulate prediction horizons.
    Evaluate(Args),
    /// Fit autoregressive baselines, select by AIC and forecast.
    Baseline(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<StageReport> {
    let (stage, args) = match &cli.command {
        Command::Synth(a) => ("synth", a),
        Command::Decompose(a) => ("decompose", a),
        Command::Forecast(a) => ("forecast", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::Baseline(a) => ("baseline", a),
    };
    let config = ExperimentConfig::load(&args.config).map_err(|e| tag("config", e))?;
    let exp = Experiment::new(config, args.out.clone()).map_err(|e| tag("config", e))?;
    let result = match cli.command {
        Command::Synth(_) => exp.synth(),
        Command::Decompose(_) => exp.decompose(),
        Command::Forecast(_) => exp.forecast(),
        Command::Evaluate(_) => exp.evaluate(),
        Command::Baseline(_) => exp.baseline(),
    };
    result.map_err(|e| tag(stage, e))
}

/// Prefixes the subcommand unless the library already tagged it.
fn tag(stage: &'static str, e: analogcast_core::Error) -> analogcast_core::Error {
    match e {
        e @ analogcast_core::Error::Stage { stage: s, .. } if s == stage => e,
        e => analogcast_core::Error::Stage {
            stage,
            source: Box::new(e),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            for f in &report.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
