//! Command-line experiments: synthesize scenes, train a sampling network,
//! fit scenes, evaluate results and sweep sampling budgets.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod svg;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use consac::training::LossKind;

pub use pipeline::{fit_scene, Fit, Method};
pub use report::FitResult;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations; exit code 1.
    Usage(String),
    /// Unreadable, malformed or inconsistent data; exit code 2.
    Data(String),
}

impl From<consac::ConsacError> for CliError {
    fn from(e: consac::ConsacError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "consac", version, about = "Conditional sample consensus experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes.
    Synth(SynthArgs),
    /// Train a sampling network.
    Train(TrainArgs),
    /// Fit multiple model instances to one scene or a directory of scenes.
    Fit(FitArgs),
    /// Score fit results against ground truth.
    Eval(EvalArgs),
    /// Instance-level F1 over a grid of sampling budgets S × P.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Model class: lines or homography.
    #[arg(long)]
    pub kind: Option<String>,
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Experiment config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SamplerFlags {
    /// Instances per multi-hypothesis (M).
    #[arg(short = 'M', long)]
    pub instances: Option<usize>,
    /// Single-instance hypotheses per step (S).
    #[arg(short = 'S', long)]
    pub single_samples: Option<usize>,
    /// Multi-hypotheses (P).
    #[arg(short = 'P', long)]
    pub multi_samples: Option<usize>,
    /// Soft inlier threshold.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RefineFlags {
    #[arg(long)]
    pub em_iterations: Option<usize>,
    /// Rounds of refitting every model to its hard inliers.
    #[arg(long)]
    pub refit_iterations: Option<usize>,
    /// Hard inlier threshold for refitting, selection and assignment.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Minimum number of new inliers for an instance to be kept.
    #[arg(long)]
    pub min_increment: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model class: lines, vp or homography.
    #[arg(long)]
    pub kind: Option<String>,
    /// Directory of training scenes.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Weights file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Scenes per batch (B).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Samples per scene for the baseline (K).
    #[arg(short = 'K', long)]
    pub samples: Option<usize>,
    #[arg(short = 'M', long)]
    pub instances: Option<usize>,
    #[arg(short = 'S', long)]
    pub single_samples: Option<usize>,
    #[arg(short = 'P', long)]
    pub multi_samples: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Weight of the inlier masking regularizer.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Line-delimited JSON training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Directory for per-epoch checkpoints.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Scene file or directory of scene files.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Result file, or directory when fitting a directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Network weights, required by consac and unconditional.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Consac)]
    pub method: Method,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[command(flatten)]
    pub refine: RefineFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// SVG figure file, or directory when fitting a directory.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    /// Instance-level F1 (lines, vanishing points).
    F1,
    /// Misclassification error in percent (labeled scenes).
    Me,
    /// Area under the recall curve of vanishing point errors.
    Auc,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Result file or directory; repeat for several runs.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Scene file or directory with ground truth.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// F1 match threshold, or AUC cutoff in degrees.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Assignment threshold for ME; defaults to each result's theta.
    #[arg(long)]
    pub theta: Option<f64>,
    /// JSON report with per-scene values.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Directory of labeled scenes.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Network weights; adds the conditional method to the grid.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Methods to compare; defaults to consac (with weights) and seq-ransac.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    pub s_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    pub p_values: Vec<usize>,
    #[arg(short = 'M', long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Line-delimited JSON grid.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s {
        "supervised" => Ok(LossKind::Supervised),
        "self-supervised" => Ok(LossKind::SelfSupervised),
        other => Err(format!("unknown loss `{other}` (supervised | self-supervised)")),
    }
}

/// Runs one invocation; `argv[0]` is the program name.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with_output(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with_output<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, out),
        Command::Train(a) => commands::train(&a, out),
        Command::Fit(a) => commands::fit(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Sweep(a) => commands::sweep(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
        Err(CliError::Data(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
    }
}
