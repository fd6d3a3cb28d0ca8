use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tierprune::harness::{
    emit_report, load_report, percent, run_experiment, sweep, ExperimentReport, ReportFormat, Stage, StageError,
    SweepAxis, REPORT_JSON, SUMMARY_CSV,
};
use tierprune::ExperimentConfig;

/// Probe-guided tiered pruning of a small vision transformer.
///
/// Probe trials run on up to `TIERPRUNE_THREADS` threads.
#[derive(Parser)]
#[command(name = "tierprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its reports, trial log and checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per value of a single setting.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// prune_rate, random_number, criterion or prune_personalized
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a finished experiment's report, rewriting it in the chosen format.
    Report {
        #[arg(long = "in")]
        dir: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig, StageError> {
    let mut cfg = ExperimentConfig::load(path).map_err(|source| StageError { stage: Stage::Config, source })?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn summary_line(r: &ExperimentReport) -> String {
    let c = r.probe.counts;
    format!(
        "compression {}%  accuracy {}%  (baseline {}%)  tiers P/G/O {}/{}/{}",
        percent(r.final_compression),
        percent(r.final_accuracy),
        percent(r.baseline.accuracy),
        c.personalized,
        c.generic,
        c.other
    )
}

fn run(cli: Cli) -> Result<(), StageError> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let report = run_experiment(&cfg)?;
            println!("{}", summary_line(&report));
            println!("reports written to {}", cfg.output_dir.display());
        }
        Command::Sweep { config, axis, values, seed, out } => {
            let cfg = load_config(&config, seed, out)?;
            let table = sweep(&cfg, axis, &values)?;
            for cell in &table.cells {
                match &cell.outcome {
                    Ok(r) => println!("{axis}={}: {}", cell.value, summary_line(r)),
                    Err(e) => println!("{axis}={}: FAILED {e}", cell.value),
                }
            }
            if let Some(first) = table.cells.iter().find_map(|c| c.outcome.as_ref().err()) {
                // partial results are on disk; still report the failure
                return Err(StageError {
                    stage: first.stage,
                    source: tierprune::Error::Usage(format!("{} of {} sweep cells failed", table.failures(), table.cells.len())),
                });
            }
        }
        Command::Report { dir, format } => {
            let tag = |source| StageError { stage: Stage::Report, source };
            let report = load_report(&dir).map_err(tag)?;
            emit_report(&report, &dir, format).map_err(tag)?;
            let file = match format {
                ReportFormat::Csv => SUMMARY_CSV,
                ReportFormat::Json => REPORT_JSON,
            };
            let path = dir.join(file);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| tierprune::Error::Io { path: path.clone(), source: e })
                .map_err(tag)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli).context("tierprune") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<StageError>().map_or(1, |s| s.stage.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
