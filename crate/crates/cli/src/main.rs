//! `ccnet`: synthesize data, train, evaluate, ablate, check gradients,
//! report complexity and draw charts.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use ccnet::backbone::{Profile, Task};
use clap::{Args, Parser, Subcommand};

use crate::config::parse_name;

#[derive(Parser, Debug)]
#[command(name = "ccnet", version, about = "Context-aware convolutional image restoration")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for model init, batch order and data synthesis.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: $CCNET_OUT/<command>, else runs/<command>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Scale profile: desk or paper.
    #[arg(long, global = true, value_parser = parse_name::<Profile>)]
    pub profile: Option<Profile>,
    /// Task profile: dehaze, deblur or desnow.
    #[arg(long, global = true, value_parser = parse_name::<Task>)]
    pub task: Option<Task>,
    /// Resolve and print the configuration without running anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic paired dataset.
    Synth(commands::SynthArgs),
    /// Train a model and write logs and checkpoints.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint.
    Eval(commands::EvalArgs),
    /// Train and compare the six block/LDIM variants.
    Ablate(commands::AblateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(commands::GradcheckArgs),
    /// Report parameter and MAC counts.
    Complexity(commands::ComplexityArgs),
    /// Draw charts from metrics logs or an ablation table.
    Plot(commands::PlotArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            // parser diagnostics span several lines; keep the report to one
            let text = format!("{e:#}");
            let parts: Vec<&str> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.trim_start_matches(|c: char| c.is_ascii_digit() || c == ' ').starts_with('|'))
                .collect();
            eprintln!("error: {}", parts.join(" "));
            ExitCode::FAILURE
        }
    }
}
