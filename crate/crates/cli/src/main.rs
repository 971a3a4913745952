//! `mvft`: data preparation, training, evaluation, the view ablation grid
//! and dataset inspection.
//!
//! Exit codes: 0 success, 1 internal error, 2 config error, 3 data error.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvft::{FusionMode, ModelKind, ViewMask};

use crate::config::Overrides;

#[derive(Parser, Debug)]
#[command(name = "mvft", version, about = "Multi-view fusion transformer for activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Parse a raw `user,activity,timestamp,x,y,z;` file into windows.
    Prepare(PrepareArgs),
    /// Train one model and write a report, checkpoint and history.
    Train(TrainArgs),
    /// Score a saved checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the 11-cell (model x view subset) grid under one budget.
    Ablate(AblateArgs),
    /// Summarize a dataset: class histogram, channel stats, mean spectra.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Synthetic spec (TOML, or JSON by extension) [default: built-in 3-class spec]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
    /// Generator seed [default: from spec, 0 for the built-in spec]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Windows per class [default: from spec, 500 for the built-in spec]
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Run config; only its [prepare] section is used [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Raw sensor text file
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory
    #[arg(long, default_value = "prepared")]
    pub out: PathBuf,
}

/// Flags shared by the training commands; each overrides the config file.
#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// Run config [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file written by gen-synth or prepare
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Seed for initialization, shuffling and the split [default: from config, 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epoch budget [default: from config, 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: from config, 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: from config, 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fusion source wiring: cyclic or concat_kv [default: from config, cyclic]
    #[arg(long)]
    pub fusion_mode: Option<FusionMode>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// View subset, e.g. t,f,s [default: from config, t,f,s]
    #[arg(long)]
    pub views: Option<ViewMask>,
    /// mvft or baseline [default: from config, mvft]
    #[arg(long)]
    pub model: Option<ModelKind>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by train
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file
    #[arg(long)]
    pub data: PathBuf,
    /// Score only the test split recorded in this train report [default: all windows]
    #[arg(long)]
    pub split_from: Option<PathBuf>,
    /// Also write eval.json here [default: stdout only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Dataset file
    #[arg(long)]
    pub data: PathBuf,
    /// Write histogram.tsv and spectra.tsv here [default: everything to stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl TrainFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            fusion_mode: self.fusion_mode,
            ..Overrides::default()
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a),
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => {
            let mut o = a.flags.overrides();
            o.views = a.views;
            o.model = a.model;
            commands::train(&a.flags, &o, argv)
        }
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a.flags, &a.flags.overrides(), argv),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mvft: {f}");
            ExitCode::from(f.code())
        }
    }
}
