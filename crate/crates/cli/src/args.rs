use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Mode;

#[derive(Debug, Parser)]
#[command(
    name = "sgal",
    version,
    about = "Zero-shot learning experiments with a generate-and-learn VAE"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory and print the Bayes-oracle accuracies.
    GenData(GenDataArgs),
    /// Train a model and evaluate it on the test splits.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Generate features for one class from a checkpoint.
    Sample(SampleArgs),
    /// Project encoded rows of one split to 2-D for plotting.
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Flat `key = value` file with fixture settings.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub pretrain_iters: Option<usize>,
    #[arg(long, value_name = "N")]
    pub sgal_iters: Option<usize>,
    #[arg(long, value_name = "M")]
    pub batch_seen: Option<usize>,
    #[arg(long, value_name = "N")]
    pub batch_unseen: Option<usize>,
    #[arg(long, value_name = "L")]
    pub samples_per_latent: Option<usize>,
    #[arg(long, value_name = "X")]
    pub margin: Option<f64>,
    #[arg(long, value_name = "X")]
    pub reg_weight: Option<f64>,
    /// Pretraining learning rate; fine-tuning uses a tenth of it unless
    /// `sgal_lr` is set in the config file.
    #[arg(long, value_name = "X")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "N")]
    pub eval_every: Option<usize>,
    /// Flat `key = value` file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Restrict {
    /// Generalized setting: seen and unseen test rows against all classes.
    All,
    /// Unseen test rows against unseen classes only.
    Unseen,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub restrict: Restrict,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Dataset whose attribute table supplies the class attributes.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "N", required_unless_present = "attribute")]
    pub label: Option<u32>,
    /// Comma-separated attribute vector, instead of a dataset class.
    #[arg(long, value_name = "A0,A1,...", conflicts_with = "label")]
    pub attribute: Option<String>,
    /// Latent draws.
    #[arg(long, value_name = "N", default_value_t = 10)]
    pub count: usize,
    /// Decode each latent draw under several decoder dropout masks.
    #[arg(long)]
    pub dropout: bool,
    /// Decoder passes per latent draw; needs `--dropout` unless it is 1.
    #[arg(long, value_name = "L")]
    pub samples_per_latent: Option<usize>,
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    TestSeen,
    TestUnseen,
    /// Both test splits.
    Test,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
}
