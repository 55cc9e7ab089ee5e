use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ftsgc_cli::commands::cmd_test_causality;
use ftsgc_cli::{run, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(name = "ftsgc", version, about = "Granger causality between functional time series via Bayes factors")]
struct Args {
    #[command(subcommand)]
    command: Sub,
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress (-v) or details (-vv) to stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Replicate study on synthetic data.
    Simulate,
    /// Fit one model and summarize the posterior.
    Fit,
    /// Fit and forecast past the last observed time.
    Forecast,
    /// Bayes factor for the cause series helping predict the response.
    TestCausality,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = match args.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(args: &Args) -> Result<(), CliError> {
    let config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_seed(args.seed);
    let out = args.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let written = match args.command {
        Sub::TestCausality => {
            let (paths, report) = cmd_test_causality(&config, &out)?;
            println!("ln B = {:.4}: {}", report.log_bayes_factor, report.category.label());
            paths
        }
        Sub::Simulate => run(Command::Simulate, &config, &out)?,
        Sub::Fit => run(Command::Fit, &config, &out)?,
        Sub::Forecast => run(Command::Forecast, &config, &out)?,
    };
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
