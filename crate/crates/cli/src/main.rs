use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use zoomtrace_cli::{cmd_ablate, cmd_curate, cmd_eval, cmd_rollout, cmd_validate_config, CliError, Overrides, RunConfig};

/// Image-tool rollouts, curation and reward ablations.
///
/// Exit codes: 0 success, 1 output failure, 2 configuration error,
/// 3 data error, 4 transport failure. The endpoint key is read from the
/// variable named by `endpoint.api_key_env` (default ZOOMTRACE_API_KEY).
#[derive(Parser)]
#[command(name = "zoomtrace", version)]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out groups for every sample and export trajectories with advantages
    Rollout {
        /// Line-delimited JSON dataset
        dataset: PathBuf,
    },
    /// Filter a dataset and write the kept samples plus an audit log
    Curate {
        dataset: PathBuf,
        /// Draw this many samples from the kept pool by source weights
        #[arg(long, default_value_t = 0)]
        mixture: usize,
    },
    /// Train the toy policy under each tool-reward mode
    Ablate,
    /// One rollout per sample; report accuracy and zoom IoU
    Eval { dataset: PathBuf },
    /// Print the resolved configuration
    ValidateConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Rollout { dataset } => {
            let m = cmd_rollout(&cfg, &dataset)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
        }
        Command::Curate { dataset, mixture } => {
            let s = cmd_curate(&cfg, &dataset, mixture)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        }
        Command::Ablate => {
            let r = cmd_ablate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        }
        Command::Eval { dataset } => {
            let m = cmd_eval(&cfg, &dataset)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
        }
        Command::ValidateConfig => print!("{}", cmd_validate_config(&cfg)),
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
