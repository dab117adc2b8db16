//! driftguard CLI: pretrain / personalize / sample / eval / sweep / gradcheck.
//!
//! Exit codes: 0 success, 2 user or config error, 3 training/runtime failure,
//! 4 data-integrity failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use driftguard::objectives::Norm;
use driftguard::{runs, Error};

#[derive(Parser)]
#[command(
    name = "driftguard",
    version,
    about = "2D conditional diffusion testbed for measuring distributional drift under personalization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on the pentagon mixture.
    Pretrain {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Output root (defaults to DRIFTGUARD_OUT, then ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the pretraining seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Personalize a base checkpoint on the new class.
    Personalize {
        #[arg(long)]
        config: PathBuf,
        /// Base (teacher) checkpoint.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Regularizer norm: l1, l2 or l2sq.
        #[arg(long)]
        norm: Option<String>,
    },
    /// Draw class-conditional samples from a checkpoint into a CSV.
    Sample {
        /// Checkpoint to sample from.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure drift of a personalized checkpoint against its base.
    Eval {
        #[arg(long)]
        base: PathBuf,
        /// Personalized checkpoint.
        #[arg(long)]
        per: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV file the report row is appended to.
        #[arg(long)]
        out: PathBuf,
        /// Lambda annotation recorded in the report row.
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Method annotation recorded in the report row.
        #[arg(long, default_value = "eval")]
        method: String,
    },
    /// Run the lambda sweep from a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Base checkpoint (overrides [sweep] base in the config).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel cells (overrides [sweep] jobs).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of random (architecture, probe) draws.
        #[arg(long, default_value_t = 20)]
        draws: usize,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain { config, out, seed } => {
            let dir = runs::run_pretrain(&config, out.as_deref(), seed)?;
            println!("pretrain run written to {}", dir.display());
        }
        Command::Personalize {
            config,
            base,
            out,
            seed,
            norm,
        } => {
            let norm = norm.map(|s| s.parse::<Norm>()).transpose()?;
            let dir = runs::run_personalize(&config, &base, out.as_deref(), seed, norm)?;
            println!("personalize run written to {}", dir.display());
        }
        Command::Sample {
            base,
            class,
            n,
            seed,
            out,
        } => {
            runs::run_sample(&base, class, n, seed, &out)?;
            println!("{n} samples of class {class} written to {}", out.display());
        }
        Command::Eval {
            base,
            per,
            seed,
            out,
            lambda,
            method,
        } => {
            let report = runs::run_eval(&base, &per, seed, lambda, &method, &out)?;
            println!(
                "delta_theta_l2 {:.6} delta_eps {:.3} kl {:.4} mean_coverage {:.3} (row appended to {})",
                report.delta_theta_l2,
                report.delta_eps,
                report.kl_base_vs_per,
                report.coverage.iter().sum::<f64>() / report.coverage.len() as f64,
                out.display()
            );
        }
        Command::Sweep {
            config,
            base,
            out,
            jobs,
        } => {
            let dir = runs::run_sweep(&config, base.as_deref(), out.as_deref(), jobs)?;
            println!("sweep written to {}", dir.display());
        }
        Command::Gradcheck { seed, draws } => {
            let worst = driftguard::nn::grad_check_harness(draws, seed)?;
            println!("max relative error over {draws} draws: {worst:.3e}");
            if worst >= 1e-4 {
                return Err(Error::Internal(format!(
                    "gradient check failed: {worst:.3e} >= 1e-4"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
