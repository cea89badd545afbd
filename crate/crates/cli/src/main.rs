mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use cen_core::engine::{Hyperparams, Variant};
use clap::{Args, Parser, Subcommand};

/// Context embedding network pipeline.
#[derive(Debug, Parser)]
#[command(name = "cen", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and crowd campaign.
    Simulate(SimulateArgs),
    /// Train a model on a dataset file.
    Train(TrainArgs),
    /// Evaluate a trained model.
    Eval(EvalArgs),
    /// Search for low-entropy grids and write them as a grid queue.
    Synthesize(SynthesizeArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Snapshot the annotation store as a dataset file.
    Export(ExportArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Directory for dataset.jsonl, truth.jsonl and world.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub n_images: usize,
    #[arg(long, default_value_t = 4)]
    pub k_true: usize,
    /// Values per attribute: one number for all, or a comma-separated list.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub cardinalities: Vec<usize>,
    #[arg(long, default_value_t = 24)]
    pub biased_workers: usize,
    #[arg(long, default_value_t = 16)]
    pub context_workers: usize,
    #[arg(long, default_value_t = 1.0)]
    pub prior_mass: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub off_attribute_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    pub biased_temperature: f64,
    #[arg(long, default_value_t = 0.001)]
    pub context_temperature: f64,
    /// Every other worker merges attribute values into two groups.
    #[arg(long)]
    pub mixed_granularity: bool,
    #[arg(long, default_value_t = 600)]
    pub n_grids: usize,
    #[arg(long, default_value_t = 24)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 30)]
    pub grids_per_worker: usize,
    #[arg(long, default_value_t = 10)]
    pub min_grids_per_worker: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Flags that map one-to-one onto the training hyperparameters.
#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long, default_value = "mixture")]
    pub variant: Variant,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 6.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub xi_pos: f64,
    #[arg(long, default_value_t = 6.0)]
    pub xi_neg: f64,
    #[arg(long, default_value_t = 5e-6)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.001)]
    pub learning_rate: f64,
    /// Use the unweighted distance in the dissimilar-pair hinge.
    #[arg(long)]
    pub unweighted_negative: bool,
}

impl HyperArgs {
    pub fn hyperparams(&self) -> Hyperparams {
        let mut h = Hyperparams {
            k: self.k,
            xi_pos: self.xi_pos,
            xi_neg: self.xi_neg,
            gamma: self.gamma,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            batch_size: self.batch,
            epochs: self.epochs,
            variant: self.variant,
            seed: self.seed,
            hidden: self.hidden,
            negative_term_weighted: !self.unweighted_negative,
            ..Hyperparams::default()
        };
        h.adam.learning_rate = self.learning_rate;
        h
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file (line-delimited JSON).
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for model.json, checkpoint.json, loss.csv and split files.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Fraction of grids held out; 0 trains on everything.
    #[arg(long, default_value_t = 0.15)]
    pub test_fraction: f64,
    /// Seed of the grid split; defaults to --seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Continue from a saved checkpoint instead of a fresh model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Held-out split for pair accuracy.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Dataset whose clusterings are scored for attribute retrieval.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Hidden attribute per clustering of --data.
    #[arg(long, requires = "data")]
    pub truth: Option<PathBuf>,
    /// World file, for k-means on the embeddings scored by MCC.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Directory for report.json and the CSV exports.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Grid queue file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub candidates: usize,
    #[arg(long, default_value_t = 50)]
    pub top_n: usize,
    /// Keep only grids whose most activated dimension is this one.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long, default_value_t = 24)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Service configuration (TOML) naming the store.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random parameter draws per variant.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
