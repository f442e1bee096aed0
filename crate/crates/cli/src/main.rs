use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ltx_cli::{execute, exit_code, init_threads, Command, Stage};

#[derive(Parser)]
#[command(
    name = "ltx",
    version,
    about = "Prune a network round by round and track its explanations"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Parent directory of the run; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs instead of writing a new rerun directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Every stage in order.
    Run(Args),
    /// Initialize θ₀ and train the dense round.
    Train(Args),
    /// Remaining pruning rounds.
    Prune(Args),
    /// Per-round concept banks.
    Concepts(Args),
    /// Per-round concept bottleneck models and top-k tables.
    Pcbm(Args),
    /// Per-round Grad-CAM heatmaps.
    Gradcam(Args),
    /// Consistency report across rounds.
    Report(Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Run(a) => (Command::Run, a),
        Cmd::Train(a) => (Command::Stage(Stage::Train), a),
        Cmd::Prune(a) => (Command::Stage(Stage::Prune), a),
        Cmd::Concepts(a) => (Command::Stage(Stage::Concepts), a),
        Cmd::Pcbm(a) => (Command::Stage(Stage::Pcbm), a),
        Cmd::Gradcam(a) => (Command::Stage(Stage::Gradcam), a),
        Cmd::Report(a) => (Command::Stage(Stage::Report), a),
    };
    let result = init_threads()
        .map_err(anyhow::Error::from)
        .and_then(|()| execute(command, &args.config, args.out.as_deref(), args.force));
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
