use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gp_sbc::cli::{run, Command, RunOptions};

#[derive(Parser)]
#[command(
    name = "gp-sbc",
    version,
    about = "Simulation-based calibration for Gaussian process models"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Run GP-SBC and test the rank histograms for uniformity.
    Sbc(Common),
    /// Run GP-SBC with and without the configured fault, side by side.
    DemoBug(Common),
    /// Check whether Type-II maximum likelihood is adequate for the data.
    MargCheck(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "GP_SBC_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    // usage errors exit 1: 2 and 3 are verdicts
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, common) = match cli.command {
        Sub::Sbc(c) => (Command::Sbc, c),
        Sub::DemoBug(c) => (Command::DemoBug, c),
        Sub::MargCheck(c) => (Command::MargCheck, c),
    };
    let opts = RunOptions {
        config: common.config,
        out: common.out,
        seed: common.seed,
        threads: common.threads,
    };
    ExitCode::from(run(command, &opts) as u8)
}
