use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xsrank::cli::{make_synthetic_panel, CliError, RunConfig, SynthSpec};

/// Cross-sectional currency momentum with context-aware re-ranking.
#[derive(Parser)]
#[command(name = "xsrank", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: ingest, features, walk-forward training,
    /// backtest, and report emission.
    Run {
        /// TOML configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's model list (comma-separated shorthands).
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the worker count (0 = default).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Generate a synthetic prices.csv + vix.csv pair.
    Synth {
        #[arg(long, default_value_t = 31)]
        assets: usize,
        #[arg(long, default_value_t = 2500)]
        days: usize,
        /// Momentum signal strength in [0, 1].
        #[arg(long, default_value_t = 0.3)]
        momentum: f64,
        /// Planted context signal strength in [0, 2].
        #[arg(long, default_value_t = 0.0)]
        context: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Directory receiving the two CSV files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the headline table from a finished run's report.json.
    Report {
        /// Run output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XSRANK_LOG", "warn")).init();
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch() -> Result<(), CliError> {
    match Args::parse().command {
        Command::Run {
            config,
            seed,
            models,
            out,
            workers,
        } => {
            let mut cfg = RunConfig::from_toml_file(&config)?;
            if let Some(seed) = seed {
                cfg.run.seed = seed;
            }
            if let Some(models) = models {
                cfg.run.models = models;
            }
            if let Some(out) = out {
                cfg.run.out_dir = out;
            }
            if let Some(workers) = workers {
                cfg.run.workers = workers;
            }
            let outcome = xsrank::cli::run(&cfg)?;
            println!(
                "wrote {} artifacts to {}",
                outcome.files.len(),
                outcome.out_dir.display()
            );
            Ok(())
        }
        Command::Synth {
            assets,
            days,
            momentum,
            context,
            seed,
            out,
        } => {
            let spec = SynthSpec::new(assets, days, momentum, context, seed);
            make_synthetic_panel(&spec, &out)?;
            println!("wrote prices.csv and vix.csv to {}", out.display());
            Ok(())
        }
        Command::Report { out } => {
            let table = xsrank::cli::print_report(&out)?;
            print!("{table}");
            Ok(())
        }
    }
}
