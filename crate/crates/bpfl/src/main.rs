use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use bpfl::config::ExperimentConfig;
use bpfl::gradsuite::{run_suite, SUITE_SEEDS, SUITE_TOLERANCE};
use bpfl::protocol::param_count_report;
use bpfl::runner::{build_experiment, report_from_csv, run_experiment};

#[derive(Parser)]
#[command(name = "bpfl", about = "Federated-learning simulator with a shared bypass model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics.csv, summary.json, run.log, final.ckpt.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Suppress per-round stdout lines (still logged to run.log).
        #[arg(long)]
        quiet: bool,
    },
    /// Verify analytic gradients against finite differences.
    GradCheck {
        #[arg(long, default_value_t = SUITE_SEEDS)]
        seeds: u64,
    },
    /// Print exact trainable-parameter counts for a config.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize final-round metrics from a metrics.csv.
    Report {
        #[arg(long)]
        csv: PathBuf,
    },
}

fn thread_count() -> anyhow::Result<usize> {
    match std::env::var("BPFL_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .with_context(|| format!("BPFL_THREADS={v:?} is not a positive integer"))?;
            if n == 0 {
                bail!("BPFL_THREADS must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn load_config(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    Ok(ExperimentConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run {
            config,
            seed,
            out,
            resume,
            quiet,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            run_experiment(&cfg, &out, resume.as_deref(), thread_count()?, quiet)?;
            println!("artifacts written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::GradCheck { seeds } => {
            let results = run_suite(seeds, SUITE_TOLERANCE)?;
            let mut failed = 0usize;
            for r in &results {
                let status = if r.pass() { "PASS" } else { "FAIL" };
                println!(
                    "{status}  {:<30}  worst rel err {:.3e}  (tol {:.1e})",
                    r.name,
                    r.report.worst(),
                    r.report.tolerance
                );
                if !r.pass() {
                    failed += 1;
                }
            }
            println!("{} checks, {} failed", results.len(), failed);
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::ParamCount { config } => {
            let cfg = load_config(&config)?;
            let exp = build_experiment(&cfg)?;
            print!("{}", param_count_report(&exp.clients, &cfg.ablation));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Report { csv } => {
            let text = std::fs::read_to_string(&csv)
                .with_context(|| format!("reading {}", csv.display()))?;
            print!("{}", report_from_csv(&text)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
