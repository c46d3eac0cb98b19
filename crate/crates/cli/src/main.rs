mod commands;
mod logger;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

use magicforge_core::metrics::Mode;

/// Counterfactual segmentation dataset synthesis, training and evaluation.
///
/// Configuration is merged as defaults < config file < --set < dedicated
/// flags. Exit codes: 0 success, 1 data error, 2 config or usage error.
#[derive(Debug, Parser)]
#[command(name = "magicforge", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON config file.
    #[arg(long, global = true, env = "MAGICFORGE_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (default: logical CPUs). 1 runs sequentially.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log level for the JSON-lines log on stderr.
    #[arg(long, global = true, default_value = "info", value_parser = parse_level)]
    pub log_level: LevelFilter,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset: manifest.jsonl, vocabulary.json, images/ and run-report.json.
    Synth(SynthArgs),
    /// Detect and segment user-supplied images for given categories.
    Label(LabelArgs),
    /// Check a manifest against the record invariants.
    Validate(ValidateArgs),
    /// Train the toy segmenter and write a model.json checkpoint.
    Train(TrainArgs),
    /// Score predictions or a model against a manifest; writes report.json.
    Eval(EvalArgs),
    /// Finite-difference checks of the loss and model gradients.
    Gradcheck(GradcheckArgs),
    /// Desk-scale ablations over the subset size or the counterfactual weight.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// vocabulary.json (default: the built-in 12-category desk vocabulary).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Accepted samples to produce (pipeline.samples_target).
    #[arg(long)]
    pub count: Option<usize>,
    /// Master seed (pipeline.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// vocabulary.json (default: the built-in desk vocabulary).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// JSONL of {"image": "path.png", "categories": ["name", ...]}; paths relative to this file.
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSONL of masks; a label-report.json is written beside it.
    #[arg(long, default_value = "labels.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
    /// train.steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// train.seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Predicted masks as JSONL of {"id", "masks"}.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    pub pred: Option<PathBuf>,
    /// Checkpoint to run on the manifest images.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Points per image for pmiou.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub bg_threshold: Option<f64>,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// `m=<list>` (numbers, `known`, `full`) or `w3=<list>`. Repeatable.
    #[arg(long, required = true)]
    pub sweep: Vec<String>,
    /// Training seeds per setting.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// vocabulary.json (default: the built-in desk vocabulary).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Held-out scenes (training scenes come from pipeline.samples_target).
    #[arg(long, default_value_t = 50)]
    pub held_out: usize,
    #[arg(long, default_value = "ablation.json")]
    pub out: PathBuf,
}

fn parse_level(s: &str) -> Result<LevelFilter, String> {
    s.parse().map_err(|_| format!("unknown log level {s:?}"))
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "miou" => Ok(Mode::Miou),
        "pmiou" => Ok(Mode::Pmiou),
        _ => Err(format!("expected miou or pmiou, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logger::init(cli.global.log_level);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{}", f.message());
            ExitCode::from(f.code())
        }
    }
}
