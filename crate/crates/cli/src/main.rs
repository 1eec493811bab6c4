use std::path::PathBuf;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod io;

use commands::Context;
use config::PipelineConfig;
use error::CliError;
use io::{Format, Writer};

/// Simulation, fitting and reconstruction of multimode motional states.
#[derive(Parser)]
#[command(name = "mmtomo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (JSON).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; defaults to the configured one, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "both", global = true)]
    format: Format,

    /// Worker threads; 0 picks the number of cores.
    #[arg(long, env = "MMTOMO_THREADS", default_value_t = 0, global = true)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Sample readout scans of the prepared state and of every grid setting.
    Simulate,
    /// Fit Fock distributions to sampled scans.
    Fit {
        /// Fit these scan files instead of the ones written by `simulate`.
        #[arg(long)]
        scan: Vec<PathBuf>,
    },
    /// Reconstruct the density matrix from fitted displaced distributions.
    Reconstruct {
        /// Defaults to `q_manifest.json` in the output directory.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Parity phase scans between mode pairs.
    Verify,
    /// Spin-phase calibration and optional thermal occupation fit.
    Calibrate,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let config = PipelineConfig::load(&path)?;
    let dir = cli
        .out
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let seed = cli.seed.unwrap_or(config.seed);
    let mut ctx = Context {
        config,
        seed,
        writer: Writer::new(dir, cli.format)?,
    };
    match cli.command {
        Command::Simulate => commands::simulate(&mut ctx)?,
        Command::Fit { scan } => commands::fit(&mut ctx, &scan)?,
        Command::Reconstruct { manifest } => commands::reconstruct_cmd(&mut ctx, manifest)?,
        Command::Verify => commands::verify(&mut ctx)?,
        Command::Calibrate => commands::calibrate(&mut ctx)?,
    }
    for p in &ctx.writer.written {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("thread pool: {e}");
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
