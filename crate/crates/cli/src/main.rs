use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use exitlim::{describe, run_path, RunOptions};

#[derive(Parser)]
#[command(name = "exitlim", version, about = "Conditioned diffusion exit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in a config file (or replay a manifest.json).
    Run {
        config: PathBuf,
        /// Worker threads [default: available parallelism].
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory [default: `output` key, else out/<experiment>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Describe an experiment's inputs, outputs and the claims it checks.
    Describe { name: String },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Describe { name } => match describe(&name) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
        },
        Command::Run { config, workers, out } => match run_path(&config, &RunOptions { out, workers }) {
            Ok(summary) => {
                if let Some(e) = &summary.error {
                    eprintln!("error: {e}");
                }
                println!("{} -> {}", if summary.pass { "PASS" } else { "FAIL" }, summary.out_dir.display());
                if summary.pass {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
