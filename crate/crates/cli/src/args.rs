use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use gradnet::training::Variant;

#[derive(Debug, Parser)]
#[command(name = "gradnet", version, about = "Siamese tracking with a learned gradient-guided template update")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML configuration file; flags override its values.
    #[arg(long, short, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, short, global = true, env = "GRADNET_OUT", default_value = "gradnet-out")]
    pub out: PathBuf,

    /// Seed for everything the command randomizes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Threads for sequence-level evaluation [default: 1].
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Start from the full-size network geometry instead of the desk one.
    #[arg(long, global = true)]
    pub paper_scale: bool,

    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the backbone and train the update branch.
    Train(TrainArgs),
    /// Track one sequence from its first ground-truth box.
    Track(TrackArgs),
    /// One-pass evaluation of a checkpoint or of stored results.
    Eval(EvalArgs),
    /// Compare variants on one suite.
    Ablate(AblateArgs),
    /// Score-map, gradient-share, plain-descent and overfit diagnostics.
    Diag(DiagArgs),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Write synthetic sequences in the OTB layout.
    Synth(SynthArgs),
    /// Print the resolved configuration.
    Config,
}

pub fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: gradnet::error::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    /// Number of training scenes.
    #[arg(long)]
    pub videos: Option<usize>,
    /// Skip the pre-train and start from this checkpoint.
    #[arg(long, value_name = "CHECKPOINT")]
    pub pretrained: Option<PathBuf>,
    /// Evaluate the one-step loss on held-out pairs every N steps.
    #[arg(long, default_value_t = 0, value_name = "N")]
    pub held_out_every: usize,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// OTB-layout sequence directory.
    #[arg(long)]
    pub sequence: PathBuf,
    /// Track as this variant instead of the one the checkpoint was trained as.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Never refresh the template online.
    #[arg(long)]
    pub no_update: bool,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["checkpoint", "results"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<sequence>.txt` box files to score instead of tracking.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Root of OTB-layout sequences; the configured synthetic suite when absent.
    #[arg(long)]
    pub sequences: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub no_update: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// `LABEL=PATH` or `PATH`; a label naming a variant tracks as that
    /// variant. Without any, every configured variant is trained per seed.
    #[arg(long = "checkpoint", value_name = "[LABEL=]PATH")]
    pub checkpoints: Vec<String>,
    #[arg(long)]
    pub sequences: Option<PathBuf>,
    /// Seeds of the training protocol.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Option<Vec<Variant>>,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    /// Checkpoints to compare; statistics are reported against the first.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Held-out probe pairs.
    #[arg(long, default_value_t = 16)]
    pub probes: usize,
    /// Plain gradient descent on the template over a learning-rate grid.
    #[arg(long)]
    pub sgd: bool,
    /// Smallest rate of the grid; four more follow, one per decade.
    #[arg(long, default_value_t = gradnet::training::diagnostics::DEFAULT_LR_BASE)]
    pub lr_base: f64,
    #[arg(long, default_value_t = 1000)]
    pub sgd_cap: usize,
    /// Training logs, one per variant, for the fit-versus-held-out curves.
    #[arg(long = "train-log")]
    pub train_logs: Vec<PathBuf>,
    /// Held-out curves written by `train --held-out-every`, aligned with
    /// `--train-log`.
    #[arg(long = "held-out")]
    pub held_out: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FaultArg {
    SignFlip,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Coordinates sampled per tensor and instance.
    #[arg(long, default_value_t = 6)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Corrupt the analytic gradients to exercise the failure path.
    #[arg(long, value_enum)]
    pub fault: Option<FaultArg>,
    /// Also measure how much the template-head gradient depends on
    /// differentiating through the shallow gradient.
    #[arg(long)]
    pub second_order: bool,
    /// Parameters for the second-order measurement; a random live
    /// instance when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of sequences; the configured suite size when absent.
    #[arg(long)]
    pub count: Option<usize>,
}
