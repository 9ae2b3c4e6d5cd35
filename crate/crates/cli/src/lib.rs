//! `usamkit` command-line front end: generates synthetic record files,
//! computes the sampling-based entropies, trains USAM heads and writes
//! correction-curve, correlation, ablation and runtime reports.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use usamkit::backend::SyntheticWorld;
use usamkit::mlp::TrainConfig;
use usamkit::sampling::ModelId;

pub mod commands;
pub mod data;
pub mod manifest;
pub mod svg;

/// Invalid flags or parameters; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "usamkit", version, about = "Uncertainty quantification for promptable segmentation")]
pub struct Cli {
    /// Master seed. Seeds the synthetic world, training and the random baseline.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic sample sets to a record file.
    Generate(GenerateArgs),
    /// Per-sample entropies and baselines as CSV.
    Bayes(BayesArgs),
    /// Train USAM heads on a record file.
    Train(TrainArgs),
    /// Correction curves and rel-AUC per scenario.
    Eval(EvalArgs),
    /// Pearson correlation matrix between IoU and the uncertainty measures.
    Correlate(CorrelateArgs),
    /// Retrain the direct heads with one token half zeroed.
    Ablate(AblateArgs),
    /// Runtime of the uncertainty methods.
    Bench(BenchArgs),
    /// Per-sample IoU targets as CSV and thresholded masks as RLE JSON lines.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// All six augmentations.
    Full,
    /// Identity augmentation only; enough for everything except H_Y.
    Identity,
}

/// Overrides of the default synthetic world.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct WorldArgs {
    /// World seed; defaults to --seed. Fixes the token projections, so train
    /// and test files must share it.
    #[arg(long = "world.seed")]
    pub seed: Option<u64>,
    /// Image size, `N` or `HxW`.
    #[arg(long = "world.size", value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    /// Corruption per model in large,base_plus,small,tiny order.
    #[arg(long = "world.model-noise", value_delimiter = ',', num_args = 1..)]
    pub model_noise: Option<Vec<f64>>,
    #[arg(long = "world.prompt-gain")]
    pub prompt_gain: Option<f64>,
    /// Probability that the three heads target different granularities.
    #[arg(long = "world.ambiguity")]
    pub ambiguity: Option<f64>,
    #[arg(long = "world.score-noise")]
    pub score_noise: Option<f64>,
    #[arg(long = "world.token-noise")]
    pub token_noise: Option<f64>,
    /// Start from the noiseless world (other overrides still apply).
    #[arg(long = "world.noiseless")]
    pub noiseless: bool,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn parse_model(s: &str) -> std::result::Result<ModelId, String> {
    s.parse()
}

impl WorldArgs {
    pub fn build(&self, default_seed: u64) -> Result<SyntheticWorld> {
        let seed = self.seed.unwrap_or(default_seed);
        let mut w = if self.noiseless {
            SyntheticWorld::noiseless(seed)
        } else {
            SyntheticWorld::with_seed(seed)
        };
        if let Some(s) = self.size {
            w.image_size = s;
        }
        if let Some(n) = &self.model_noise {
            w.model_noise = n
                .as_slice()
                .try_into()
                .map_err(|_| usage(format!("--world.model-noise needs 4 values, got {}", n.len())))?;
        }
        if let Some(v) = self.prompt_gain {
            w.prompt_gain = v;
        }
        if let Some(v) = self.ambiguity {
            w.ambiguity = v;
        }
        if let Some(v) = self.score_noise {
            w.score_noise = v;
        }
        if let Some(v) = self.token_noise {
            w.token_noise = v;
        }
        w.validate().map_err(|e| usage(e.to_string()))?;
        Ok(w)
    }
}

/// Optimizer overrides; unset values come from the known-good configuration.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

impl TrainFlags {
    pub fn config(&self, seed: u64) -> Result<TrainConfig> {
        let d = TrainConfig::known_good(seed);
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            seed,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    /// Number of sample sets.
    #[arg(long)]
    pub n: usize,
    /// Index of the first sample; use disjoint ranges for train and test.
    #[arg(long, default_value_t = 0)]
    pub first: u64,
    /// Prompt points per sample.
    #[arg(long, default_value_t = 8)]
    pub prompts: usize,
    #[arg(long, value_enum, default_value_t = GridKind::Full)]
    pub grid: GridKind,
    /// Output record file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub world: WorldArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BayesArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Model whose proposals the per-model measures use.
    #[arg(long, value_parser = parse_model, default_value = "tiny")]
    pub model: ModelId,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Output directory for the head checkpoints.
    #[arg(long)]
    pub heads: PathBuf,
    /// Heads to train, comma-separated (default: all).
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
    /// Random-search trials; the best configuration trains every head.
    #[arg(long)]
    pub search: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    pub heads: PathBuf,
    /// model-swap, prompt-refine, task-supervise, gt-correct or all.
    #[arg(long, default_value = "all")]
    pub scenario: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_model, default_value = "tiny")]
    pub model: ModelId,
    /// Also write an SVG plot per scenario.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub heads: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_model, default_value = "tiny")]
    pub model: ModelId,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    /// Training records.
    #[arg(long)]
    pub records: PathBuf,
    /// Test records; without them a seeded fraction of --records is held out.
    #[arg(long)]
    pub test_records: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_model, default_value = "tiny")]
    pub model: ModelId,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    /// Mask side lengths.
    #[arg(long, value_delimiter = ',', default_value = "256,1024")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Worker threads: `USAMKIT_THREADS` if set, else rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("USAMKIT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("USAMKIT_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

pub fn run(cli: Cli) -> Result<()> {
    let pool = thread_pool()?;
    let seed = cli.seed;
    pool.install(|| match &cli.command {
        Command::Generate(a) => commands::generate(a, seed),
        Command::Bayes(a) => commands::bayes(a, seed),
        Command::Train(a) => commands::train(a, seed),
        Command::Eval(a) => commands::eval(a, seed),
        Command::Correlate(a) => commands::correlate(a, seed),
        Command::Ablate(a) => commands::ablate(a, seed),
        Command::Bench(a) => commands::bench(a, seed),
        Command::Export(a) => commands::export(a, seed),
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| usage(e.to_string()))?;
    run(cli)
}
