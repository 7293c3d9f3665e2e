use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use particle_heads::cli::{execute, Command, Invocation};

#[derive(Parser)]
#[command(name = "particle-heads", version, about = "Train particle-simulator transformers and study their attention heads")]
struct Args {
    /// TOML config file; missing keys fall back to the selected preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.total_steps=2000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory (overrides the `output` key).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Replace existing artifacts whose contents differ.
    #[arg(long, global = true)]
    force: bool,
    /// Do not mirror progress lines to stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Validate and print the resolved configuration.
    Config,
    /// Simulate the training trajectories.
    GenData,
    /// Train the model and write checkpoints.
    Train,
    /// Score every head at every checkpoint.
    AnalyzeHeads,
    /// Weight-restricted SGLD estimates for the selected heads.
    EstimateLlc,
    /// Fit power laws to the attention-distance correlation curves.
    FitPowerlaws,
    /// Autoregressive rollout of the final checkpoint.
    Rollout,
    /// Gradient-flow and mean-field reference computations.
    TheoryLab,
    /// Join head, fit and LLC series into per-head tables.
    Report,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let command = match args.command {
        Cmd::Config => Command::Config,
        Cmd::GenData => Command::GenData,
        Cmd::Train => Command::Train,
        Cmd::AnalyzeHeads => Command::AnalyzeHeads,
        Cmd::EstimateLlc => Command::EstimateLlc,
        Cmd::FitPowerlaws => Command::FitPowerlaws,
        Cmd::Rollout => Command::Rollout,
        Cmd::TheoryLab => Command::TheoryLab,
        Cmd::Report => Command::Report,
    };
    let inv = Invocation {
        config: args.config,
        overrides: args.overrides,
        output: args.output,
        force: args.force,
    };
    match execute(command, &inv, !args.quiet) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
