//! The `arcdet` command line: data synthesis, training, detection,
//! evaluation, gradient checking and ablation sweeps.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use arcdet_core::config::{RunConfig, CONFIG_FILE};
use arcdet_core::Error;

mod commands;

pub use commands::{manifest_lines, MANIFEST_FILE};

/// Environment variable that replaces `[run] seed`.
pub const SEED_ENV: &str = "ARC_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 1 for usage errors, 2 for data errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::InvalidSpec(_) => 1,
                Error::Divergence { .. } => 3,
                _ => 2,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "arcdet",
    version,
    about = "Aspect-ratio and context aware mixture detection head"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration; every section and key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed, overriding both the config and ARC_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses one per core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and persist the train and test scenes.
    Synth(SynthArgs),
    /// Train the cascade on a synthesized dataset.
    Train(TrainArgs),
    /// Run the cascade over a dataset split and write detections.
    Detect(DetectArgs),
    /// Score a detection file against ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients of the full chain with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the variants of one ablation axis.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing dataset.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub train_scenes: Option<usize>,
    #[arg(long)]
    pub test_scenes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint and progress file in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many steps (over all stages) have run.
    #[arg(long)]
    pub until: Option<usize>,
    /// Steps per stage, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub stage_steps: Option<Vec<usize>>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use only the first N cascade stages.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Dataset split to detect on.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write the pooling cell grids of every RoI of the first scene to cells.txt.
    #[arg(long)]
    pub dump_cells: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long)]
    pub gts: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7")]
    pub thresholds: Vec<f64>,
    /// Also report AP averaged over IoU 0.50:0.95.
    #[arg(long)]
    pub coco: bool,
    /// Use 11-point interpolation instead of all points.
    #[arg(long)]
    pub eleven_point: bool,
    /// Directory for metrics.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    pub scenes: usize,
    #[arg(long, default_value_t = 16)]
    pub rois: usize,
    /// Side of the square feature map of each fixture scene.
    #[arg(long, default_value_t = 12)]
    pub map: usize,
    #[arg(long, default_value_t = 5)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Coordinates checked per parameter block.
    #[arg(long, default_value_t = 12)]
    pub per_block: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// aspect_ratios, context or stages.
    #[arg(long)]
    pub axis: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds to repeat every variant with; defaults to the run seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7")]
    pub thresholds: Vec<f64>,
}

/// Loads the config and applies `ARC_SEED` and `--seed`, in that order.
pub fn load_config(common: &Common, env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => CliError::Usage(e.to_string()),
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = env_seed {
        cfg.run.seed = s
            .trim()
            .parse()
            .map_err(|e| CliError::Usage(format!("{SEED_ENV}={s:?}: {e}")))?;
    }
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

/// Creates `dir` and writes the effective config into it.
pub fn prepare_out_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    arcdet_core::checkpoint::write_atomic(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    Ok(())
}

/// Runs one parsed invocation inside a pool of `--workers` threads.
pub fn run(cli: Cli) -> Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = load_config(&cli.common, env_seed.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", cli.common.workers)))?;
    pool.install(|| commands::dispatch(cfg, cli.command))
}
