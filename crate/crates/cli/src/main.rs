use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use rsrl_cli::config::load_config;
use rsrl_cli::counterexample::counterexample;
use rsrl_cli::runner::{run_exact, run_sweep, run_train};
use rsrl_core::risk::RiskMeasure;

#[derive(Parser)]
#[command(
    name = "rsrl",
    about = "Risk-sensitive distributional RL: exact operators, counterexamples, and tabular agents",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the biased-operator counterexample tables; exits nonzero if
    /// any entry deviates from the exact expected values (default
    /// measure only).
    Counterexample {
        /// Risk measure spec, e.g. cvar:0.1, mean, wang:-0.75
        #[arg(long, default_value = "cvar:0.1")]
        measure: String,
    },
    /// Run the exact methods (history policy iteration, brute force,
    /// mean value iteration, risk-greedy iteration) and write
    /// exact_summary.csv.
    Exact {
        #[arg(long)]
        config: String,
    },
    /// Train one agent per the config and write learning_curve.csv,
    /// histogram.csv, policy_log.csv, and table checkpoints.
    Train {
        #[arg(long)]
        config: String,
    },
    /// Train one run per seed in parallel and aggregate sweep.csv.
    Sweep {
        #[arg(long)]
        config: String,
        /// Comma-separated seed list, e.g. 0,1,2,3,4
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Counterexample { measure } => {
            let beta = RiskMeasure::parse(&measure)?;
            let default = RiskMeasure::cvar(0.1).expect("valid level");
            let check = beta == default;
            let report = counterexample(&beta, check);
            for line in &report.lines {
                println!("{line}");
            }
            if !check {
                println!("(non-default measure: values reported without assertion)");
            }
            Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Exact { config } => {
            let cfg = load_config(&config)?;
            let (rows, dir) = run_exact(&cfg)?;
            for row in &rows {
                println!(
                    "{:<24} root_beta={:<16} converged={} sweeps={} policy={}",
                    row.method,
                    format!("{}", row.root_beta),
                    row.converged,
                    row.sweeps,
                    row.policy_fingerprint
                );
            }
            println!("wrote {}", dir.join("exact_summary.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train { config } => {
            let cfg = load_config(&config)?;
            let out = run_train(&cfg, None)?;
            if let Some(last) = out.records.last() {
                println!(
                    "final: step={} measure={} mean_return={}",
                    last.step, last.measure_value, last.mean_return
                );
            }
            println!("wrote {}", out.dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep { config, seeds } => {
            let cfg = load_config(&config)?;
            let out = run_sweep(&cfg, &seeds)?;
            println!(
                "sweep over {} seeds: {} succeeded, {} failed",
                seeds.len(),
                out.per_seed.len(),
                out.failures.len()
            );
            for (seed, err) in &out.failures {
                eprintln!("seed {seed} failed: {err}");
            }
            println!("wrote {}", out.dir.join("sweep.csv").display());
            Ok(if out.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
