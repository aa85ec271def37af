//! Command-line harness for anchored teacher-student distillation runs:
//! teacher pretraining, single training runs, hyperparameter sweeps, and
//! cross-run report tables.

mod commands;
mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atsc", version, about = "Anchored teacher-student distillation harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Byte-stable outputs: wall-clock columns are zeroed.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain a teacher and write its checkpoint.
    Pretrain(RunArgs),
    /// Run one training configuration.
    Train(RunArgs),
    /// Run a parameter grid with paired seeds; emits a table and a plot.
    Sweep(RunArgs),
    /// Aggregate completed run directories into a comparison table.
    Report {
        /// Run directories written by `train` (or sweep cells).
        dirs: Vec<PathBuf>,
        /// Writes report.csv here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Pretrain(a) => commands::cmd_pretrain(&a.config, a.seed, a.out, a.deterministic),
        Cmd::Train(a) => commands::cmd_train(&a.config, a.seed, a.out, a.deterministic),
        Cmd::Sweep(a) => commands::cmd_sweep(&a.config, a.seed, a.out, a.deterministic),
        Cmd::Report { dirs, out } => commands::cmd_report(&dirs, out),
    }
}
