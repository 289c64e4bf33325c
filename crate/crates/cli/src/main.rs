mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rewardrank_core::data::PolicyTag;
use rewardrank_core::Error;

#[derive(Parser, Debug)]
#[command(name = "rewardrank", version, about = "Goal-conditioned pairwise reward model toolkit")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset container.
    GenData(GenDataArgs),
    /// Train a reward model and save the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or oracle scores) on a dataset.
    Eval(EvalArgs),
    /// Fit temperature and isotonic calibration on held-out pairs.
    Calibrate(CalibrateArgs),
    /// Potential-based shaping study on gridworlds.
    ShapeDemo(ShapeDemoArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Random,
    Expert,
    Mixed,
}

impl From<PolicyArg> for PolicyTag {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Random => PolicyTag::Random,
            PolicyArg::Expert => PolicyTag::Expert,
            PolicyArg::Mixed => PolicyTag::Mixed,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Temperature,
    Isotonic,
    Both,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<usize>,
    /// Emit a reverse variant per task family.
    #[arg(long, overrides_with = "no_variants")]
    variants: bool,
    #[arg(long)]
    no_variants: bool,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Repeat count of random actions.
    #[arg(long)]
    action_repeat: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<PolicyArg>>,
    #[arg(long)]
    num_views: Option<usize>,
    #[arg(long)]
    tokens_per_view: Option<usize>,
    #[arg(long)]
    token_dim: Option<usize>,
    #[arg(long)]
    goal_dim: Option<usize>,
    #[arg(long)]
    paraphrases: Option<usize>,
    #[arg(long)]
    heldout_paraphrases: Option<usize>,
    #[arg(long)]
    paraphrase_scale: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    occlusion_rate: Option<f64>,
    /// Views that observe the object (default: all).
    #[arg(long, value_delimiter = ',')]
    object_views: Option<Vec<usize>>,
    /// Exclude this family's reverse variant from training.
    #[arg(long)]
    holdout_reverse: Option<usize>,
    /// Seed of the encoder, goal vectors and scene layouts.
    #[arg(long)]
    world_seed: Option<u64>,
    /// Seed of the episodes.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Bin width of TCP coordinates for deduplication (m).
    #[arg(long)]
    eps_c: Option<f64>,
    /// Bin width of normalized rewards for deduplication.
    #[arg(long)]
    eps_r: Option<f64>,
    /// Minimum normalized reward gap of a pair.
    #[arg(long)]
    pair_min_gap: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint and logs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Loss temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    heldout_fraction: Option<f64>,
    #[arg(long)]
    heldout_pairs: Option<usize>,
    #[arg(long)]
    proj_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    head_widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    film_widths: Option<Vec<usize>>,
    #[command(flatten)]
    data_args: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "oracle_scores")]
    checkpoint: Option<PathBuf>,
    /// Score with the normalized ground truth instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle_scores: bool,
    /// Report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pairs_per_task: Option<usize>,
    /// Temperature of the raw probability readout.
    #[arg(long)]
    readout_tau: Option<f64>,
    #[command(flatten)]
    data_args: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    pairs_per_task: Option<usize>,
    #[arg(long)]
    readout_tau: Option<f64>,
    #[command(flatten)]
    data_args: DataArgs,
    /// Seeds pair sampling and the fit/test split.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ShapeDemoArgs {
    /// Output directory for the JSON report and text summary.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint for the learned potential.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Dataset whose manifest describes the synthetic world.
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    /// Square grid sizes for the invariance check.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Grid size of the learning study.
    #[arg(long)]
    study_size: Option<usize>,
    /// Number of learning seeds.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Random potentials per grid size.
    #[arg(long)]
    random_potentials: Option<usize>,
    /// Task family whose forward goal conditions the learned potential.
    #[arg(long)]
    family: Option<usize>,
    /// Probes of the partial-observation divergence check.
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    probe_occlusion: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) | Error::NonConvergence { .. } | Error::UndefinedTau(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::ShapeDemo(a) => commands::shape_demo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
