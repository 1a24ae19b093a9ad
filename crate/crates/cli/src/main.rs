//! Batch front-end: `aniframe <subcommand> --config <path> [--threads N] [--unsafe-pure-shear]`.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure (partial
//! artifacts plus `failure.json` in the output directory).

// `!(x > 0.0)` is how NaN gets rejected alongside the out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use artifacts::{config_hash, resolve_out_dir, Artifacts};
use commands::{Flags, RunError};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "aniframe", version, about = "Anisotropic wavelet frame experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// cap on worker threads
    #[arg(long)]
    threads: Option<usize>,
    /// accept non-expansive shears
    #[arg(long)]
    unsafe_pure_shear: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Dilation geometry report
    Validate(Common),
    /// Vanishing-moment table
    Moments(Common),
    /// Gram matrix and diagonal-dominance diagnostics
    Gram(Common),
    /// Neumann inverse of the Gram matrix with decay report
    Invert(Common),
    /// Calderon-sum obstruction index
    Calderon(Common),
    /// Shear sweep of the obstruction index with the conjecture fit
    Sweep(Common),
    /// Molecular norm of the generator
    Molnorm(Common),
    /// Optimize the dual over the kernel of the synthesis matrix
    Optimize(Common),
    /// Pair constant against the condition number
    Scaling(Common),
    /// Embedding-constant scan
    Embed(Common),
}

type Runner = fn(&RunConfig, Flags, &mut Artifacts) -> Result<(), RunError>;

impl Command {
    fn parts(&self) -> (&'static str, &Common, Runner) {
        match self {
            Command::Validate(c) => ("validate", c, commands::validate),
            Command::Moments(c) => ("moments", c, commands::moments_table),
            Command::Gram(c) => ("gram", c, commands::gram_report),
            Command::Invert(c) => ("invert", c, commands::invert),
            Command::Calderon(c) => ("calderon", c, commands::calderon),
            Command::Sweep(c) => ("sweep", c, commands::sweep),
            Command::Molnorm(c) => ("molnorm", c, commands::molnorm),
            Command::Optimize(c) => ("optimize", c, commands::optimize),
            Command::Scaling(c) => ("scaling", c, commands::scaling),
            Command::Embed(c) => ("embed", c, commands::embed),
        }
    }
}

fn set_threads(n: Option<usize>) -> Result<(), String> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err("--threads must be at least 1".into());
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())?;
    #[cfg(not(feature = "parallel"))]
    log::warn!("built without the parallel feature; --threads {n} has no effect");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (name, common, run) = cli.command.parts();

    if let Err(e) = set_threads(common.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let (cfg, bytes) = match RunConfig::load(&common.config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {}: {e}", common.config.display());
            return ExitCode::from(2);
        }
    };
    let dir = resolve_out_dir(cfg.output_dir.as_deref());
    let mut out = match Artifacts::new(dir.clone(), config_hash(&bytes), name) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: cannot create {}: {e}", dir.display());
            return ExitCode::from(2);
        }
    };
    let flags = Flags {
        unsafe_pure_shear: common.unsafe_pure_shear,
    };
    match run(&cfg, flags, &mut out) {
        Ok(()) => {
            for p in out.written() {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error ({}): {}", e.kind(), e.message());
            let failure = json!({
                "kind": e.kind(),
                "exit_code": e.exit_code(),
                "error": e.message(),
                "partial_artifacts": out.written(),
            });
            if let Err(w) = out.json("failure.json", &failure) {
                eprintln!("error: could not write failure.json: {w:#}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
