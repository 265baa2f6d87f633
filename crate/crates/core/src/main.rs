use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lesslab::runner::{self, ExperimentConfig};
use lesslab::{Error, Result};

#[derive(Parser)]
#[command(name = "lesslab", about = "Barely-supervised learning on synthetic blobs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Extra `key=value` settings applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train every (tau, seed) pair and tabulate accuracies.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        tau: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Aggregate the summaries found under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
    /// List every config key.
    Keys,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lesslab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, set } => {
            let out = runner::run_file(&config, &set)?;
            print!("{}", out.summary.to_kv());
        }
        Command::Sweep {
            config,
            tau,
            seeds,
            set,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            runner::apply_overrides(&mut cfg, &set)?;
            print!("{}", runner::sweep_tau(&cfg, &tau, &seeds)?.render());
        }
        Command::Report { runs } => {
            if !runs.is_dir() {
                return Err(Error::Io {
                    path: runs,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
                });
            }
            print!("{}", runner::report(&runs)?);
        }
        Command::Keys => {
            let defaults = ExperimentConfig::default().to_kv();
            for ((_, doc), line) in runner::KEYS.iter().zip(defaults.lines()) {
                println!("{line:<32} # {doc}");
            }
        }
    }
    Ok(())
}
