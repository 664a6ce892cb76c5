use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use continual_gp::harness::{emit_reports, run_experiment, ExperimentConfig};
use continual_gp::GpError;

#[derive(Parser)]
#[command(name = "continual-gp", version, about = "Continual sparse GP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its reports.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_ALL_ABORTED: u8 = 3;

fn load(path: &PathBuf) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::from_path(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_CONFIG)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Validate { config } => match load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run {
            config,
            out,
            replicas,
            seed,
        } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(r) = replicas {
                cfg.metrics.replicas = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outdir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
            let outcome = match run_experiment(&cfg) {
                Ok(o) => o,
                Err(e @ (GpError::Config(_) | GpError::Parameter(_) | GpError::Ingestion { .. } | GpError::Io { .. })) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_ALL_ABORTED);
                }
            };
            if outcome.replicas_ok == 0 {
                for a in &outcome.aborted {
                    eprintln!("replica {} aborted: {}", a.replica, a.message);
                }
                return ExitCode::from(EXIT_ALL_ABORTED);
            }
            if let Err(e) = emit_reports(&outcome, &outdir) {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
            println!(
                "{} steps, {}/{} replicas ok, reports in {}",
                outcome.steps.len(),
                outcome.replicas_ok,
                cfg.metrics.replicas,
                outdir.display()
            );
            ExitCode::SUCCESS
        }
    }
}
