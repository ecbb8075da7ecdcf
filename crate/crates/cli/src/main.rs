//! Experiment runner for the fine-tuning robustness lab.

mod analyze;
mod config;
mod runner;
mod sweep;
mod theory_cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ftlab::peft;
use ftlab::tracking::{Schedule, ScheduleMode};
use ftlab::Error;

#[derive(Parser)]
#[command(name = "ftlab", about = "Fine-tuning robustness laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for sweeps and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed override for run and sweep base configs.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one tracked fine-tuning run from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per value of a swept axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: lr, rank, reduction_factor, method, separation, seed.
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract frontiers, AUC table, and peak reports from run directories.
    Analyze {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Closed-form and Monte-Carlo accuracy of the Gaussian feature model.
    Theory {
        /// Weak feature counts (comma-separated grid).
        #[arg(long, value_delimiter = ',', default_value = "100")]
        d: Vec<usize>,
        /// Adapted weight counts.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        k: Vec<usize>,
        /// Mean shift, or `auto` for the target-accuracy lower bound.
        #[arg(long, default_value = "auto")]
        eta: String,
        /// Target accuracy used by `--eta auto`.
        #[arg(long, default_value_t = 0.99)]
        target: f64,
        /// Attack budgets.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        eps: Vec<f64>,
        /// Monte-Carlo sample count.
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        /// PGD steps for the Monte-Carlo attack.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the grid as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the evaluation steps of a tracking schedule.
    Schedule {
        #[arg(long, value_parser = parse_mode)]
        mode: ScheduleMode,
        #[arg(long)]
        total: u64,
    },
    /// Print the PEFT decomposition registry.
    Decompose {
        /// Write the registry as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<ScheduleMode, String> {
    match s {
        "adversarial" => Ok(ScheduleMode::Adversarial),
        "ood" => Ok(ScheduleMode::Ood),
        other => Err(format!("unknown mode `{other}` (adversarial|ood)")),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Diverged { .. } => 3,
        Error::Io(_) | Error::Json(_) | Error::Csv { .. } | Error::Data(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // a failed global-pool init only means it was already set
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match dispatch(cli.command, cli.seed) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command, seed: Option<u64>) -> ftlab::Result<ExitCode> {
    match cmd {
        Command::Run { config, out } => {
            let mut cfg = config::ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.training.seed = seed;
            }
            let dir = out
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| Error::Config("no output directory (set out_dir or --out)".into()))?;
            let completed = runner::run_experiment(&cfg, &dir, &dir.join("pretrained"))?;
            println!(
                "run complete: {} records in {}{}",
                completed.outcome.records.len(),
                dir.display(),
                if completed.outcome.diverged { " (diverged)" } else { "" }
            );
            if completed.outcome.diverged {
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, axis, values, out } => {
            let mut cfg = config::ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.training.seed = seed;
            }
            let dir = out
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| Error::Config("no output directory (set out_dir or --out)".into()))?;
            let any_diverged = sweep::sweep(&cfg, &axis, &values, &dir)?;
            println!("sweep complete: {} runs in {}", values.len(), dir.display());
            if any_diverged {
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { runs, out } => {
            analyze::analyze(&runs, &out)?;
            println!("analysis written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Theory { d, k, eta, target, eps, n, steps, seed, out } => {
            theory_cmd::theory(&d, &k, &eta, target, &eps, n, steps, seed, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Schedule { mode, total } => {
            let steps = Schedule::standard(mode).eval_steps(total);
            println!(
                "{}",
                steps.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Decompose { csv } => {
            print!("{}", peft::registry_csv());
            if let Some(path) = csv {
                std::fs::write(&path, peft::registry_csv())?;
                eprintln!("registry written to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
