//! `mfc` — configuration-driven front end of the mean-field control
//! laboratory.
//!
//! Exit codes: 0 success, 1 runtime/verification failure, 2 configuration or
//! usage error.

mod commands;
mod config;
mod manifest;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mfc", version, about = "Mean-field control experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the mean-field control problem and write the solution fields.
    SolveMfg(CommonArgs),
    /// Classify stability over a family of initial measures.
    StabilityScan(CommonArgs),
    /// Measure the propagation-of-chaos rate of the particle system.
    ChaosRate(CommonArgs),
    /// Compare the exact small-N values against the mean-field value.
    VnCompare(CommonArgs),
    /// Evaluate the second-order optimality form on seeded test fields.
    SecondOrderCheck(CommonArgs),
    /// Run the full invariant suite; exit 1 on any failing check.
    Verify(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::SolveMfg(_) => "solve-mfg",
            Self::StabilityScan(_) => "stability-scan",
            Self::ChaosRate(_) => "chaos-rate",
            Self::VnCompare(_) => "vn-compare",
            Self::SecondOrderCheck(_) => "second-order-check",
            Self::Verify(_) => "verify",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Self::SolveMfg(a)
            | Self::StabilityScan(a)
            | Self::ChaosRate(a)
            | Self::VnCompare(a)
            | Self::SecondOrderCheck(a)
            | Self::Verify(a) => a,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = cli.command.args();

    if let Some(threads) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error_kind = \"thread_pool\"\nerror_message = \"{e}\"");
            return ExitCode::from(2);
        }
    }

    let mut cfg = match config::ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(message) => {
            eprintln!("error_kind = \"config_parse\"\nerror_message = \"{message}\"");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.run.out_dir = out.display().to_string();
    }
    let out_dir = PathBuf::from(&cfg.run.out_dir);
    // The effective (post-override) config is what gets hashed; a rerun of
    // the same invocation therefore reproduces the manifest hash too.
    let config_text = cfg.to_toml();

    match commands::run(cli.command.name(), &cfg, &out_dir, &config_text) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error_kind = \"{}\"\nerror_message = \"{}\"", e.kind, e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
