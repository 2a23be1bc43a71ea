//! Command-line front end. Exit codes: 0 success, 1 usage or config error,
//! 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::{in_local_distribution, partition_to_json};
use crate::error::Error;
use crate::experiment;
use crate::io;
use crate::metrics::{self, ClassAccuracyVector};
use crate::verify;

pub const THREADS_ENV: &str = "FEDNSIM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "fednsim", version, about = "Deterministic federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a federation and write rounds.csv, summary.json and manifest.json.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; falls back to FEDNSIM_THREADS, then all cores.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition the training data and report per-client statistics.
    Partition {
        config: PathBuf,
        #[arg(long)]
        stats: bool,
        /// Write indices and label distributions as JSON.
        #[arg(long)]
        export: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the analytical properties numerically.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute forgetting and accuracy drift from a round CSV.
    Metrics { round_csv: PathBuf },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(c) => Failure::Usage(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.federation.master_seed = s;
    }
    Ok(cfg)
}

fn threads_from_env() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map(Some)
            .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} = `{v}` is not a positive integer"))),
        Err(_) => Ok(None),
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            seed,
            threads,
            out,
        } => {
            let mut cfg = load(&config, seed)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            if threads == Some(0) {
                return Err(Failure::Usage("--threads must be >= 1".into()));
            }
            let threads = match threads {
                Some(n) => Some(n),
                None => threads_from_env()?,
            };
            let output = experiment::run_experiment(&cfg, threads)?;
            let s = &output.summary;
            let f = s.forgetting.map_or("n/a".to_string(), |f| f.to_string());
            println!(
                "rounds={} final_accuracy={} peak_accuracy={} forgetting_F={} out={}",
                s.rounds,
                s.final_accuracy,
                s.peak_accuracy,
                f,
                output.out_dir.display()
            );
            Ok(())
        }
        Command::Partition {
            config,
            stats,
            export,
            seed,
        } => {
            let cfg = load(&config, seed)?;
            let (train, _) = experiment::load_data(&cfg)?;
            let partition = cfg.partition_spec().apply(&train)?;
            if stats || export.is_none() {
                println!("client,size,classes_present,p");
                for client in &partition {
                    if client.is_empty() {
                        println!("{},0,0,", client.client_id);
                        continue;
                    }
                    let p = in_local_distribution(client, &train)?;
                    let present = p.as_slice().iter().filter(|&&v| v > 0.0).count();
                    let probs: Vec<String> = p.as_slice().iter().map(f64::to_string).collect();
                    println!("{},{},{},{}", client.client_id, client.len(), present, probs.join(" "));
                }
            }
            if let Some(path) = export {
                std::fs::write(&path, partition_to_json(&partition, &train)?).map_err(Error::from)?;
            }
            Ok(())
        }
        Command::Verify { trials, seed } => {
            let report = verify::run_suite(trials, seed)?;
            for line in &report.lines {
                println!("{line}");
            }
            if report.all_passed() {
                Ok(())
            } else {
                Err(Failure::Runtime("some checks failed".into()))
            }
        }
        Command::Metrics { round_csv } => {
            let logs = io::read_round_csv(&round_csv)?;
            let history: Vec<ClassAccuracyVector> = logs.iter().map(|l| l.class_acc.clone()).collect();
            match metrics::forgetting_measure(&history) {
                Ok(f) => println!("forgetting_F={f}"),
                Err(_) => println!("forgetting_F=n/a"),
            }
            println!("round,cosine_to_previous");
            for (round, cos) in metrics::cosine_drift_series(&history) {
                println!("{round},{cos}");
            }
            Ok(())
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}
