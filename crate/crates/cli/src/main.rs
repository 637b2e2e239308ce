//! `flowtrack` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "flowtrack",
    version,
    about = "Grouped-token attention tracker: training, tracking and evaluation"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Configuration file (`key = value` lines, optional `[section]` headers).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set flow.variant=C`. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Defaults the config file and overrides start from. `train-toy`,
    /// `ablate` and `grad-check` default to `toy`, other commands to `full`.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Run directory name under `paths.out_dir`; defaults to the command name.
    #[arg(long)]
    pub run_name: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Toy,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a toy model on synthetic sequences.
    TrainToy {
        /// Number of synthetic training sequences.
        #[arg(long, default_value_t = 200)]
        sequences: usize,
    },
    /// Write synthetic sequences as sequence directories.
    GenSynth {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Track one sequence directory.
    Track {
        #[arg(long)]
        sequence: PathBuf,
        /// Parameter checkpoint; falls back to `paths.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score sequences, either tracking them or reading a prediction file.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        sequence: Vec<PathBuf>,
        /// Prediction file (`x,y,w,h[,confidence]` lines) for a single sequence.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate several variants over several seeds.
    Ablate {
        /// Comma-separated variant names.
        #[arg(long, default_value = "baseline,C,full")]
        variants: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long, default_value_t = 200)]
        train_sequences: usize,
        #[arg(long, default_value_t = 50)]
        eval_sequences: usize,
    },
    /// Write the classification map of one frame as a PGM heatmap.
    EmitHeatmap {
        /// Sequence directory; a synthetic sequence is generated when absent.
        #[arg(long)]
        sequence: Option<PathBuf>,
        /// 1-based frame to visualise (at least 2).
        #[arg(long, default_value_t = 2)]
        frame: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of a small model.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Write every layer's attention mask as a 0/1 grid per variant.
    MaskDump {
        /// Comma-separated variant names; all variants when absent.
        #[arg(long)]
        variants: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainToy { .. } => "train-toy",
            Command::GenSynth { .. } => "gen-synth",
            Command::Track { .. } => "track",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::EmitHeatmap { .. } => "emit-heatmap",
            Command::GradCheck { .. } => "grad-check",
            Command::MaskDump { .. } => "mask-dump",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::dispatch(&cli.global, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Core(ref c) => commands::exit_code(c),
                CliError::CheckFailed(_) => 3,
            })
        }
    }
}
