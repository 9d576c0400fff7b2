//! `openfake` command-line harness.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "openfake", version, about = "Open-set facial forgery detection experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Threshold percentile λ in [0, 100].
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Weight of real anchors in the Stage-1 loss.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark.
    SynthGen {
        #[arg(long)]
        n_videos: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
    },
    /// Train both stages on the training split and save the model bundle.
    Train {
        /// Forgery methods withheld from training.
        #[arg(long, value_delimiter = ',')]
        unknown: Vec<String>,
    },
    /// Estimate per-class thresholds for a trained model.
    Calibrate {
        /// Model bundle directory (default `<out>/model`).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run an evaluation protocol.
    Eval {
        #[arg(long, value_enum, default_value_t = Protocol::CrossManipulation)]
        protocol: Protocol,
    },
    /// Compare settings along one ablation axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// α values for the alpha axis, or loss names for repr-method.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Grad-CAM overlays and embedding layouts for a trained model.
    Explain {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Test samples per class rendered as overlays.
        #[arg(long, default_value_t = 4)]
        per_class: usize,
    },
    /// Render every report found under the output directory.
    Report,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    CrossManipulation,
    CrossFamily,
    CrossDataset,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Alpha,
    SchemeStage1,
    SchemeStage3,
    ReprMethod,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::SynthGen { n_videos, frames, side } => commands::synth_gen(&cli.global, n_videos, frames, side),
        Command::Train { unknown } => commands::train(&cli.global, &unknown),
        Command::Calibrate { model } => commands::calibrate(&cli.global, model),
        Command::Eval { protocol } => commands::eval(&cli.global, protocol),
        Command::Ablate { axis, seeds, values } => commands::ablate(&cli.global, axis, &seeds, &values),
        Command::Explain { model, per_class } => commands::explain(&cli.global, model, per_class),
        Command::Report => commands::report(&cli.global),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
