use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use propel::env::EnvId;
use propel::error::Error;
use propel::harness;

#[derive(Parser)]
#[command(name = "propel", version, about = "Train and evaluate programmatic policies by mirror descent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Parallel jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Noise-free evaluation of a checkpoint (DSL text, tree JSON or MLP JSON).
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        /// Extra sensor name for DSL text, as NAME=INDEX. Repeatable.
        #[arg(long = "sensor", value_parser = parse_sensor)]
        sensors: Vec<(String, usize)>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median, mean and std of final scores per method and environment.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Also write the summary as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_sensor(s: &str) -> Result<(String, usize), String> {
    let (name, idx) = s.split_once('=').ok_or_else(|| format!("expected NAME=INDEX, got {s:?}"))?;
    let idx = idx.trim().parse().map_err(|e| format!("sensor index {idx:?}: {e}"))?;
    Ok((name.trim().to_string(), idx))
}

/// Exit status 2 for bad configuration or input, 1 for anything else.
fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Type(_) | Error::Checkpoint(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train { config, jobs } => {
            let cfg = harness::ExperimentConfig::load(&config)?;
            let summary = harness::cmd_train(&cfg, jobs)?;
            println!(
                "{} succeeded, {} failed; results in {}",
                summary.succeeded,
                summary.failed,
                summary.dir.join("results.csv").display()
            );
            Ok(if summary.succeeded > 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Eval { policy, env, episodes, seed_base, sensors, out } => {
            let env: EnvId = env.parse()?;
            let report = harness::cmd_eval(&policy, env, episodes, seed_base, &sensors)?;
            println!("{} on {}: {:.2} ± {:.2} over {} episodes", report.policy, report.env, report.mean, report.std, episodes);
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { results, csv } => {
            let rows = harness::cmd_report(&results)?;
            print!("{}", harness::format_summary(&rows));
            if let Some(csv) = csv {
                harness::write_summary_csv(&csv, &rows)?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    run(cli).unwrap_or_else(|e| fail(&e))
}
