//! `brainshot`: generate data, split classes, train backbones, evaluate
//! few-shot methods, sweep hyperparameters and tabulate reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use brainshot_core::eval::MethodKind;
use brainshot_core::paradigms::{FeatureTransform, PtMapPrediction};
use brainshot_core::{Arch, SplitPart};
use clap::{Args, Parser, Subcommand};

use config::Paradigm;

#[derive(Parser, Debug)]
#[command(name = "brainshot", version, about = "Few-shot decoding of brain activation maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (manifest, samples, graph, ground truth).
    GenSynth(GenSynthArgs),
    /// Partition classes into base / validation / novel.
    Split(SplitArgs),
    /// Train a backbone on the base classes.
    Train(TrainArgs),
    /// Evaluate a few-shot method over sampled tasks.
    Eval(EvalArgs),
    /// Train and score a hyperparameter grid on the validation classes.
    Sweep(SweepArgs),
    /// Tabulate evaluation reports side by side.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub rois: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// Noise standard deviation on the signal dimensions.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Trailing dimensions holding class-independent unit noise.
    #[arg(long)]
    pub nuisance: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Do not emit a structural graph.
    #[arg(long)]
    pub no_graph: bool,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output file (split.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base, validation and novel class counts.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct GraphArgs {
    /// Fraction of heaviest edges kept before building the operator.
    #[arg(long)]
    pub graph_keep: Option<f64>,
    /// Keep edge weights instead of binarizing the adjacency.
    #[arg(long)]
    pub weighted_adjacency: bool,
    /// Number of diffusion steps.
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub paradigm: Option<Paradigm>,
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Validation tasks used to select the best base-training epoch.
    #[arg(long)]
    pub selection_tasks: Option<usize>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub inner_lr: Option<f64>,
    #[arg(long)]
    pub meta_lr: Option<f64>,
    #[arg(long)]
    pub meta_batch: Option<usize>,
    #[arg(long)]
    pub tasks_per_epoch: Option<usize>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Split part to draw tasks from.
    #[arg(long)]
    pub part: Option<SplitPart>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<MethodKind>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// SimpleShot feature transform: none, l2n or cl2n.
    #[arg(long)]
    pub transform: Option<FeatureTransform>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub map_iterations: Option<usize>,
    #[arg(long)]
    pub sinkhorn_iterations: Option<usize>,
    /// Final PT+MAP prediction: plan or nearest-center.
    #[arg(long)]
    pub prediction: Option<PtMapPrediction>,
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub archs: Option<Vec<Arch>>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// Methods with default hyperparameters (baseline, simpleshot, ptmap,
    /// maml); use a config file for custom method settings.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<MethodKind>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Validation tasks per point.
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub meta_epochs: Option<usize>,
    #[arg(long)]
    pub tasks_per_epoch: Option<usize>,
    #[command(flatten)]
    pub graph: GraphArgs,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// report.json files or directories containing one.
    pub reports: Vec<PathBuf>,
    /// Directory for comparison.{csv,json,txt}; prints only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_threads() -> anyhow::Result<Option<usize>> {
    let Ok(raw) = std::env::var("FEWSHOT_THREADS") else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("FEWSHOT_THREADS must be a positive integer, got `{raw}`"))?;
    anyhow::ensure!(n > 0, "FEWSHOT_THREADS must be a positive integer, got `{raw}`");
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(Some(n))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = init_threads()?;
    match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a, threads),
        Command::Sweep(a) => commands::sweep_cmd(a, threads),
        Command::Compare(a) => commands::compare(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let error = serde_json::json!({
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{error}");
            ExitCode::FAILURE
        }
    }
}
