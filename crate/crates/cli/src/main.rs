//! `couplingflow` command line: train, score and inspect coupling flows.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use couplingflow::data::{DataSpec, Family};
use couplingflow::flow::{BnMode, MaskKind, Shape3};

#[derive(Parser)]
#[command(
    name = "couplingflow",
    version,
    about = "Coupling-layer flows and likelihood-based OOD detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config; writes checkpoint, metrics and the resolved config.
    Train(TrainArgs),
    /// Score a dataset with a trained checkpoint.
    Score(ScoreArgs),
    /// AUROC (and optional threshold metrics) from two score files.
    Auroc(AurocArgs),
    /// Histogram of a score file.
    Hist(HistArgs),
    /// Latent images and coupling-layer traces.
    Visualize(VisualizeArgs),
    /// Redraw the latent variables of an image region and decode.
    Resample(ResampleArgs),
    /// Run every finite-difference gradient check.
    Gradcheck(GradcheckArgs),
    /// Print a mask pattern.
    Masks(MasksArgs),
    /// Write a synthetic image family as an IDX file.
    GenData(GenDataArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `run.output_dir`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset reference, e.g. `idx:test.idx` or `synthetic:patches:300:8:30`.
    #[arg(long)]
    pub data: DataSpec,
    /// Dataset name recorded in the score file.
    #[arg(long, default_value = "data")]
    pub name: String,
    #[arg(long, default_value = "scores.csv")]
    pub out: PathBuf,
    /// Run config whose `score.*` settings define the scoring policy.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct AurocArgs {
    /// Score file holding the in-distribution set.
    #[arg(long = "in")]
    pub in_file: PathBuf,
    #[arg(long = "ood")]
    pub ood_file: PathBuf,
    /// Dataset name inside the `--in` file (needed if it holds several).
    #[arg(long)]
    pub in_name: Option<String>,
    #[arg(long)]
    pub ood_name: Option<String>,
    /// Likelihood threshold; `score >= tau` predicts in-distribution.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Also write the metrics as CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct HistArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Lower edge; defaults to the smallest score.
    #[arg(long, allow_negative_numbers = true)]
    pub lo: Option<f64>,
    /// Upper edge (exclusive); defaults to just above the largest score.
    #[arg(long, allow_negative_numbers = true)]
    pub hi: Option<f64>,
    /// Output CSV; standard output if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: DataSpec,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of leading images to visualize.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Dequantization draws averaged per latent image.
    #[arg(long, default_value_t = couplingflow::inspect::DEFAULT_NOISE_SAMPLES)]
    pub noise_samples: usize,
    #[arg(long, default_value = "eval")]
    pub bn_mode: BnMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ResampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: DataSpec,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Square region as `TOP,LEFT,SIZE` in pixels.
    #[arg(long)]
    pub region: String,
    /// Number of independent redraws.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct MasksArgs {
    #[arg(long)]
    pub kind: MaskKind,
    /// `CxHxW`.
    #[arg(long)]
    pub shape: Shape3,
    #[arg(long, default_value_t = 0)]
    pub phase: usize,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub family: Family,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let mut lines = text.lines();
            let first = lines
                .next()
                .unwrap_or("")
                .trim_start_matches("error:")
                .trim();
            eprintln!("error: usage: {first}");
            for l in lines {
                eprintln!("{l}");
            }
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Score(a) => commands::score(a),
        Command::Auroc(a) => commands::auroc(a),
        Command::Hist(a) => commands::hist(a),
        Command::Visualize(a) => commands::visualize(a),
        Command::Resample(a) => commands::resample(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Masks(a) => commands::masks(a),
        Command::GenData(a) => commands::gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.detail());
            ExitCode::from(e.exit_code())
        }
    }
}
