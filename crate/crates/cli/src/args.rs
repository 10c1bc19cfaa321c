use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use riskqueue::analysis::SmoothingVariant;
use riskqueue::embedding::{ProviderConfig, ProviderKind};

#[derive(Debug, Parser)]
#[command(name = "riskqueue", version, about = "Template-guided early risk detection over post streams")]
pub struct Cli {
    /// Worker threads for per-user stages. Output order does not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Log filter for stderr (overridden by RUST_LOG).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect the bundled template bank.
    Templates {
        #[command(subcommand)]
        action: TemplatesAction,
    },
    /// Generate a labeled synthetic corpus.
    Synth(SynthArgs),
    /// Score every post against a template set and flag each user's top-k.
    Screen(ScreenArgs),
    /// Train the classifier on screened training users.
    Train(TrainArgs),
    /// Replay histories post by post and emit early decisions.
    Stream(StreamArgs),
    /// Score decisions against labels.
    Evaluate(EvaluateArgs),
    /// Re-derive metrics at several thresholds from recorded traces.
    Sweep(SweepArgs),
    /// Compare lexical category shares of selected and other posts.
    Lexical(LexicalArgs),
    /// Smoothed per-interval depression scores of one user.
    Curve(CurveArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Subcommand)]
pub enum TemplatesAction {
    /// Print `scale, id, dimension, text` rows of a preset, tab separated.
    List {
        #[arg(long, default_value = "full")]
        set: String,
    },
    /// Verify the bank checksum and list the available presets.
    Verify,
}

#[derive(Debug, Args)]
pub struct ProviderArgs {
    /// Embedding backend.
    #[arg(long, default_value = "local")]
    pub provider: ProviderKind,
    /// Embedding service base URL.
    #[arg(long, env = "RISKQUEUE_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Model identifier sent to the embedding service.
    #[arg(long)]
    pub model_id: Option<String>,
    /// Dimension of the local hashed embedder.
    #[arg(long, default_value_t = 384)]
    pub dim: usize,
    /// Hash seed of the local embedder.
    #[arg(long, default_value_t = 0)]
    pub embed_seed: u64,
    /// Persistent embedding cache (line-delimited JSON).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 64)]
    pub max_batch: usize,
}

impl ProviderArgs {
    pub fn config(&self) -> ProviderConfig {
        let mut c = ProviderConfig {
            kind: self.provider,
            ..ProviderConfig::local(self.dim)
        };
        c.seed = self.embed_seed;
        if let Some(e) = &self.endpoint {
            c.endpoint = e.clone();
        }
        if let Some(m) = &self.model_id {
            c.model_id = m.clone();
        }
        c.cache_path = self.cache.clone();
        c.timeout_ms = self.timeout_ms;
        c.max_batch = self.max_batch;
        c
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Flat TOML file of generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub posts_per_user: Option<usize>,
    #[arg(long)]
    pub positive_fraction: Option<f64>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `{user_id, label}` lines here.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScreenArgs {
    #[arg(long, default_value = "full")]
    pub set: String,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

impl SplitArg {
    pub fn to_split(self) -> Option<riskqueue::Split> {
        match self {
            Self::Train => Some(riskqueue::Split::Train),
            Self::Validation => Some(riskqueue::Split::Validation),
            Self::Test => Some(riskqueue::Split::Test),
            Self::All => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML model and optimizer settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output of `screen`.
    #[arg(long, alias = "scored")]
    pub screened: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Users to train on.
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "full")]
    pub set: String,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Per-user probability traces for `sweep`.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Keep tracing after an alert so sweeps above the live threshold are exact.
    #[arg(long, requires = "traces")]
    pub full_trace: bool,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub decisions: PathBuf,
    /// `{user_id, label}` lines; a labeled posts file also works.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value = "erde5,erde50,f1,auc")]
    pub metrics: String,
    /// Fixed false-positive cost instead of the positive-class share.
    #[arg(long)]
    pub c_fp: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// `start:stop:step` or a comma list.
    #[arg(long, default_value = "0.3:0.8:0.05")]
    pub thresholds: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LexicalArgs {
    #[arg(long)]
    pub scored: PathBuf,
    /// Line-delimited `{category, words}`; the bundled open lexicon if absent.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, default_value = "i,negemo,health")]
    pub categories: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    /// Recurrence on the previous group's probability.
    Previous,
    /// Recurrence on the current group's probability.
    Current,
}

impl From<VariantArg> for SmoothingVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Previous => SmoothingVariant::Previous,
            VariantArg::Current => SmoothingVariant::Current,
        }
    }
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Required when the input holds more than one user.
    #[arg(long)]
    pub user: Option<String>,
    #[arg(long, default_value_t = 14)]
    pub interval_days: u32,
    #[arg(long, default_value = "full")]
    pub set: String,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "previous")]
    pub variant: VariantArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random small configurations.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
