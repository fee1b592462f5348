//! `climcredit`: runs the pipeline stage by stage over a shared output
//! directory. Each stage verifies its inputs against the manifests of the
//! stages that wrote them and records its own manifest.

mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Artifact(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Artifact(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "climcredit", version, about = "Climate-aware multimodal credit default pipeline")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory, overriding the configuration (default `out`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic stations, weather, loans and texts.
    GenData(GenArgs),
    /// Compute monthly climate indices from station weather.
    ComputeIndices,
    /// Match loans to stations and cut 12-month climate panels.
    BuildPanels,
    /// Split loans and fit the WoE feature pipeline on the training part.
    PrepFeatures,
    /// Train one model per seed.
    Train(TrainArgs),
    /// Bootstrap test metrics of trained models.
    Evaluate(EvalArgs),
    /// Kernel SHAP attributions for a trained model.
    Explain(ExplainArgs),
    /// Spearman correlation of model predictions.
    Correlate(CorrelateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n_loans: Option<usize>,
    #[arg(long)]
    pub default_rate: Option<f64>,
    #[arg(long)]
    pub n_stations: Option<usize>,
    /// Use the 4,000-loan, 5% default test profile.
    #[arg(long)]
    pub test_profile: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Comma list such as `structured,climate`, or a short form like `S+C`.
    #[arg(long)]
    pub modality: Option<String>,
    /// `lstm`, `gru` or `transformer`.
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub text_embed_dim: Option<usize>,
    #[arg(long)]
    pub min_token_count: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub pos_weight: Option<f64>,
    /// Comma list of factors (`di,wlr,ht,cf` or `0..4`).
    #[arg(long)]
    pub climate_factors: Option<String>,
    /// Comma list of training seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Search the learning-rate, batch-size and layer grid per seed.
    #[arg(long)]
    pub grid: bool,
    /// Worker threads for seeds.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Model name; defaults to the mask and encoder, e.g. `S+C-transformer`.
    #[arg(long)]
    pub name: Option<String>,
    /// Frozen token vectors, one `token TAB v1 ... vd` line each.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Trained model whose climate branch is copied and frozen.
    #[arg(long)]
    pub hybrid_climate: Option<String>,
    /// Trained model whose text branch is copied and frozen.
    #[arg(long)]
    pub hybrid_text: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Comma list of model names; defaults to every trained model.
    #[arg(long)]
    pub models: Option<String>,
    #[arg(long)]
    pub resamples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: String,
    /// Structured-only model used to pick uncertain cases.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub background: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Percentile window `lo,hi` in [0, 1].
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Comma list of model names; defaults to every evaluated model.
    #[arg(long)]
    pub models: Option<String>,
    /// Also train and compare structured plus single-factor models.
    #[arg(long)]
    pub ablation: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out_dir = cli.out_dir.unwrap_or_else(|| PathBuf::from(cfg.out_dir.clone().unwrap_or_else(|| "out".into())));
    let ctx = stages::Context::new(cfg, out_dir);
    match cli.command {
        Command::GenData(a) => stages::gen_data(ctx, &a),
        Command::ComputeIndices => stages::compute_indices(ctx),
        Command::BuildPanels => stages::build_panels(ctx),
        Command::PrepFeatures => stages::prep_features(ctx),
        Command::Train(a) => stages::train(ctx, &a),
        Command::Evaluate(a) => stages::evaluate(ctx, &a),
        Command::Explain(a) => stages::explain(ctx, &a),
        Command::Correlate(a) => stages::correlate(ctx, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
