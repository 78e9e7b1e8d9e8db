//! `robin`: data generation, hierarchy building, training, rollout,
//! evaluation and benchmarking.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "robin", version, about = "Learned rolling-diffusion mesh simulator")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "ROBIN_LOG", default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with train/valid/test splits.
    GenData(GenDataArgs),
    /// Build and cache the graph hierarchy of every trajectory in a dataset.
    Hierarchy(HierarchyArgs),
    /// Train a denoiser and write checkpoints plus the training curve.
    Train(TrainArgs),
    /// Roll out a checkpoint and write predicted trajectories and a report.
    Rollout(RolloutArgs),
    /// Score rollouts, or existing predicted trajectories, with position RMSE.
    Eval(EvalArgs),
    /// Sweep inference modes over seeds and write a timing/accuracy table.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Run config JSON; missing keys take their defaults.
    #[arg(long, env = "ROBIN_CONFIG")]
    pub config: Option<PathBuf>,

    /// Override a config key by dotted path, e.g. `training.lr_max=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", env = "ROBIN_SET", value_delimiter = ';')]
    pub overrides: Vec<String>,

    /// Worker threads for data-parallel stages; 0 uses all cores.
    #[arg(long, env = "ROBIN_JOBS", default_value_t = 0)]
    pub jobs: usize,

    /// Run every stage on a single thread.
    #[arg(long, env = "ROBIN_DETERMINISTIC")]
    pub deterministic: bool,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Scenario family: beam or actuator.
    #[arg(long, env = "ROBIN_KIND")]
    pub kind: Option<String>,
    /// Trajectories per split as `train,valid,test`.
    #[arg(long, env = "ROBIN_COUNTS")]
    pub counts: Option<String>,
    /// Time steps per trajectory.
    #[arg(long, env = "ROBIN_STEPS")]
    pub steps: Option<usize>,
    #[arg(long, env = "ROBIN_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "ROBIN_OUT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct HierarchyArgs {
    /// Dataset directory.
    #[arg(long, env = "ROBIN_DATA")]
    pub data: PathBuf,
    /// Cache directory for hierarchy files.
    #[arg(long, env = "ROBIN_OUT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, env = "ROBIN_DATA")]
    pub data: PathBuf,
    /// Output directory for checkpoints, curve and resolved config.
    #[arg(long, env = "ROBIN_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "ROBIN_SEED")]
    pub seed: Option<u64>,
    /// Ablation switch; repeat or separate with commas.
    #[arg(long, env = "ROBIN_ABLATION", value_delimiter = ',')]
    pub ablation: Vec<String>,
    /// Hierarchy cache directory.
    #[arg(long, env = "ROBIN_CACHE")]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Args, Debug, Clone)]
pub struct RolloutSel {
    /// Checkpoint file.
    #[arg(long, env = "ROBIN_CKPT")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, env = "ROBIN_DATA")]
    pub data: PathBuf,
    /// Dataset split to roll out.
    #[arg(long, env = "ROBIN_SPLIT")]
    pub split: Option<String>,
    /// Inference mode: robi, sequential or onestep.
    #[arg(long, env = "ROBIN_MODE")]
    pub mode: Option<String>,
    /// Denoising stride of the rolling-window mode.
    #[arg(long, env = "ROBIN_M")]
    pub m: Option<usize>,
    /// Predicted steps per rollout; defaults to the full trajectory.
    #[arg(long = "T", env = "ROBIN_T")]
    pub t: Option<usize>,
    /// Seeds as a comma-separated list.
    #[arg(long, env = "ROBIN_SEEDS", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Use at most this many trajectories of the split.
    #[arg(long, env = "ROBIN_LIMIT")]
    pub limit: Option<usize>,
    #[arg(long, env = "ROBIN_CACHE")]
    pub cache: Option<PathBuf>,
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub sel: RolloutSel,
    #[arg(long, env = "ROBIN_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub sel: RolloutSel,
    /// Score trajectory files in this directory instead of rolling out.
    #[arg(long, env = "ROBIN_PRED")]
    pub pred: Option<PathBuf>,
    /// RMSE CSV path.
    #[arg(long, env = "ROBIN_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub sel: RolloutSel,
    /// Benchmark CSV path.
    #[arg(long, env = "ROBIN_OUT")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Hierarchy(a) => commands::hierarchy(a),
        Command::Train(a) => commands::train(a),
        Command::Rollout(a) => commands::rollout(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
