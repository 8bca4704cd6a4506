//! Argument parsing and subcommand dispatch for the `iwm` binary.

pub mod commands;
pub mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "iwm", version, about = "Image world model pretraining and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Config file of `key = value` lines; `[section]` headers prefix keys.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable; applied
    /// after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory for outputs and the resolved-config snapshot.
    #[arg(long, short, value_name = "DIR")]
    pub out: PathBuf,
    /// Seed for every random draw of the command (`seed` key).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug)]
pub struct WithCheckpoint {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint directory written by `pretrain` (usually `<out>/final`).
    #[arg(long, short, value_name = "DIR")]
    pub checkpoint: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain encoder and predictor; keys `data.*`, `train.*`, `aug.*`,
    /// `encoder.*`, `predictor.*`, `optim.*`, `ema.*`.
    Pretrain(Common),
    /// World-model MRR against banks of jittered targets; keys `eval.*`.
    EvalMrr(WithCheckpoint),
    /// MRR grid over (augmentation preset, predictor) runs.
    EvalGrid(GridArgs),
    /// Dump source / predicted nearest neighbour / ground truth images.
    Retrieve(WithCheckpoint),
    /// Linear probe on frozen encoder tokens; keys `probe.*`.
    ProbeLinear(WithCheckpoint),
    /// Attentive probe on frozen encoder tokens; keys `probe.*`.
    ProbeAttentive(WithCheckpoint),
    /// Finetune the predictor for classification; keys `finetune.*`, `task.*`.
    FinetunePredictor(FinetuneArgs),
    /// One predictor for several tasks; keys `multitask.*`, `finetune.*`.
    FinetuneMultitask(WithCheckpoint),
    /// Invariant codes by averaging predictions over sampled actions.
    Marginalize(WithCheckpoint),
    /// Cosine similarity of encodings of augmented views.
    Simmatrix(WithCheckpoint),
    /// Built-in checks.
    Selftest(SelftestArgs),
    /// Collect result files of several run directories into plot CSVs.
    PlotData(PlotArgs),
}

#[derive(Args, Clone, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: Common,
    /// `PRESET:PREDICTOR=CHECKPOINT_DIR`; repeat for each cell.
    #[arg(long = "run", value_name = "CELL=DIR", required = true)]
    pub runs: Vec<String>,
    /// `PRESET:PREDICTOR` cells reported as absent.
    #[arg(long = "absent", value_name = "CELL")]
    pub absent: Vec<String>,
}

#[derive(Args, Clone, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub inner: WithCheckpoint,
    /// Run all eight prediction-task variants and write `ablation.csv`.
    #[arg(long)]
    pub ablation: bool,
}

#[derive(Args, Clone, Debug)]
pub struct SelftestArgs {
    /// Which check to run.
    #[arg(value_parser = ["grad"])]
    pub what: String,
    /// Seeds per op kind.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Maximum relative gradient error.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Optional directory for `gradcheck.csv`.
    #[arg(long, short, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct PlotArgs {
    /// Output directory for the collected CSVs.
    #[arg(long, short, value_name = "DIR")]
    pub out: PathBuf,
    /// Run directories holding `mrr.json`, probe or finetune results,
    /// `grid.csv` or `ablation.csv`.
    #[arg(required = true, value_name = "RUN_DIR")]
    pub runs: Vec<PathBuf>,
}

/// Sizes the global rayon pool from `IWM_NUM_WORKERS`. Results never
/// depend on the worker count.
pub fn init_workers() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("IWM_NUM_WORKERS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("IWM_NUM_WORKERS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::Pretrain(c) => pretrain(&c),
        Command::EvalMrr(a) => eval_mrr(&a),
        Command::EvalGrid(a) => eval_grid(&a),
        Command::Retrieve(a) => retrieve(&a),
        Command::ProbeLinear(a) => probe(&a, iwm_core::probes::ProbeKind::Linear),
        Command::ProbeAttentive(a) => probe(&a, iwm_core::probes::ProbeKind::Attentive),
        Command::FinetunePredictor(a) => finetune_predictor(&a),
        Command::FinetuneMultitask(a) => finetune_multitask(&a),
        Command::Marginalize(a) => marginalize(&a),
        Command::Simmatrix(a) => simmatrix(&a),
        Command::Selftest(a) => selftest(&a),
        Command::PlotData(a) => plot_data(&a),
    }
}
