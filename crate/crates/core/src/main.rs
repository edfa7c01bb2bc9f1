use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffusion_saddle::config::{load_config, to_json};
use diffusion_saddle::experiment::{run_experiment, summarize, ExperimentStatus};
use diffusion_saddle::Error;

/// Worker-pool size override for replica fan-out.
const WORKERS_ENV: &str = "DIFFSADDLE_WORKERS";

#[derive(Parser)]
#[command(name = "diffsaddle", version, about = "Diffusion SGD saddle-point experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run { config: PathBuf },
    /// Check a config and print it with every default filled in.
    Validate { config: PathBuf },
    /// Print a report for a finished experiment.
    Summarize { manifest: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => 2,
        Error::Io(_) => 3,
        _ => 1,
    }
}

fn configure_workers() -> Result<(), Error> {
    let Ok(v) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_workers().and_then(|()| match cli.command {
        Command::Validate { config } => load_config(&config).map(|c| {
            println!("{}", to_json(&c));
            0
        }),
        Command::Run { config } => load_config(&config).and_then(|c| run_experiment(&c)).map(|out| {
            println!("wrote {}", out.manifest_path.display());
            match out.manifest.status {
                ExperimentStatus::Completed => 0,
                ExperimentStatus::Diverged => {
                    if let Some(m) = &out.manifest.message {
                        eprintln!("{m}");
                    }
                    2
                }
            }
        }),
        Command::Summarize { manifest } => summarize(&manifest).map(|r| {
            print!("{r}");
            0
        }),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
