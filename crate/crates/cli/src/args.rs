use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug, Clone)]
#[command(name = "featprobe", version, about = "Neck adapters, distillation training and feature metrics")]
pub struct Cli {
    /// Base seed; overrides seeds from config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (synth, train, cross, sweep) or report file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print exactly one JSON document on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Replace existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Generate synthetic feature files with known ground truth.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Distributional and paired metrics between two feature roles.
    Metrics(MetricsArgs),
    /// Mutual information estimates between two feature roles.
    Mi(MiArgs),
    /// Train a neck from an experiment config.
    Train(TrainArgs),
    /// Train a second neck on the outputs of a frozen first neck.
    Cross(CrossArgs),
    /// Layer sweep over seeds, emitting a curve table.
    Sweep(SweepArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand, Debug, Clone)]
pub enum SynthCommand {
    /// Jointly Gaussian pair with closed-form mutual information.
    Gaussian(GaussianArgs),
    /// Encoder / two-expert task pipeline over a shared latent.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GaussianArgs {
    #[arg(long, default_value_t = 1)]
    pub dx: usize,
    #[arg(long, default_value_t = 1)]
    pub dy: usize,
    /// Target mutual information in nats.
    #[arg(long, conflicts_with = "rho")]
    pub mi: Option<f64>,
    /// Correlation of a 1+1 dimensional pair.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Embed both sides in this many dimensions with fixed random maps.
    #[arg(long)]
    pub lift: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    #[arg(long, default_value_t = 8)]
    pub latent: usize,
    #[arg(long, default_value_t = 4)]
    pub tokens: usize,
    #[arg(long, default_value_t = 16)]
    pub encoder_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub expert_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    /// Subspace overlap between the two task bases, in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gain: f64,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Mean,
    Flatten,
}

#[derive(Args, Debug, Clone)]
pub struct PairArgs {
    /// Manifest listing the feature files.
    pub manifest: PathBuf,
    /// Role compared as `x` (adapted features).
    #[arg(long, default_value = "adapted")]
    pub x_role: String,
    /// Role compared as `y` (expert features).
    #[arg(long, default_value = "expert")]
    pub y_role: String,
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    /// TOML or JSON metric options.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long, default_value = "fd,kd_rbf,kd_poly,cos,mi1d")]
    pub metrics: String,
}

#[derive(Args, Debug, Clone)]
pub struct MiArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Comma-separated subset of mine, lmi, ksg.
    #[arg(long, default_value = "mine")]
    pub estimator: String,
    /// Number of seeds for neural estimators, counting up from `--seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Critic hidden widths, e.g. `128,128`.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub projection_dim: Option<usize>,
    #[arg(long)]
    pub neighbors: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOverrides {
    /// Experiment config (TOML or JSON), or `builtin:<name>`.
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub experiment: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub no_distill: bool,
    /// Record wall-clock time (makes records non-reproducible).
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct CrossArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Frozen first-neck checkpoint; overrides `cross.neck1` in the config.
    #[arg(long)]
    pub neck1: Option<PathBuf>,
    /// Depth of the second neck.
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Neck depths to sweep; heads follow depth.
    #[arg(long, default_value = "2,4,6")]
    pub layers: String,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = featprobe_core::gradcheck::DEFAULT_SEEDS)]
    pub seeds: usize,
    /// Test fixture: sign-flip the backward pass of one op.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}
