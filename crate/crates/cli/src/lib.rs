//! `zscir` command-line front end. Every command validates its inputs before
//! writing anything; outputs are files and logs go to stderr.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, missing inputs or inputs that fail validation.
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<zscir_core::Error> for CliError {
    fn from(e: zscir_core::Error) -> Self {
        use zscir_core::Error as E;
        match e {
            E::Input(_) | E::Format(_) | E::Lookup(_) | E::Config(_) | E::Unsupported(_) | E::Json(_) => {
                CliError::Config(e.to_string())
            }
            E::Numeric(_) | E::Generator { .. } | E::Io { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "zscir", version, about = "Zero-shot composed image retrieval toolkit", args_override_self = true)]
pub struct Cli {
    /// TOML file of flag defaults; flags on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a mock backbone descriptor.
    InitBackbone(InitBackboneArgs),
    /// Write a synthetic image corpus, concept vocabulary and query file.
    Fixtures(FixturesArgs),
    /// Generate the concept phrase bank.
    GenPhrases(GenPhrasesArgs),
    /// Encode an image directory into a normalized feature index.
    Index(IndexArgs),
    /// Optimization-based textual inversion of every image.
    Oti(OtiArgs),
    /// Distil inversion tokens into the inversion network.
    TrainPhi(TrainPhiArgs),
    /// Rank the index for every query.
    Retrieve(RetrieveArgs),
    /// Score rankings against a dataset.
    Evaluate(EvaluateArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Summary statistics of a dataset.
    Stats(StatsArgs),
    /// Estimate ground-truth coverage from a method's recall.
    Coverage(CoverageArgs),
}

#[derive(Debug, Args)]
pub struct InitBackboneArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub token_dim: usize,
    #[arg(long, default_value_t = 77)]
    pub context_length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub images: usize,
    #[arg(long, default_value_t = 20)]
    pub queries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenPhrasesArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 0.5)]
    pub temperature: f64,
    #[arg(long, default_value_t = 35)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OtiArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Image directory to encode and invert.
    #[arg(long, conflicts_with = "features", required_unless_present = "features")]
    pub images: Option<PathBuf>,
    /// Feature index to invert.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Keep tokens already in `out` and invert only the missing images.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lambda_cos: Option<f64>,
    #[arg(long)]
    pub lambda_gpt: Option<f64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub k_concepts: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainPhiArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Start from the larger-backbone schedule.
    #[arg(long)]
    pub xl: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub lambda_distil: Option<f64>,
    #[arg(long)]
    pub lambda_gpt: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub k_concepts: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RetrievalMode {
    /// Pseudo-word query from the inversion network.
    Searle,
    /// Pseudo-word query from optimization-based tokens.
    SearleOti,
    TextOnly,
    ImageOnly,
    ImagePlusText,
    Captioning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Circo,
    Cirr,
    Fashioniq,
}

impl From<FormatArg> for zscir_core::datasets::DatasetFormat {
    fn from(f: FormatArg) -> Self {
        use zscir_core::datasets::DatasetFormat as D;
        match f {
            FormatArg::Circo => D::Circo,
            FormatArg::Cirr => D::Cirr,
            FormatArg::Fashioniq => D::FashionIq,
        }
    }
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Required with a dataset; overrides per-query modes in a query file.
    #[arg(long, value_enum)]
    pub mode: Option<RetrievalMode>,
    #[arg(long, conflicts_with = "tokens")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long, conflicts_with = "queries", required_unless_present = "queries", requires = "format")]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// JSON array of query specifications.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Results per query; clamped to the number of candidates.
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long)]
    pub exclude_reference: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub format: FormatArg,
    #[arg(long)]
    pub rankings: PathBuf,
    #[arg(long, required_unless_present = "csv")]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Replace the default mAP cutoffs.
    #[arg(long = "map-k", value_delimiter = ',')]
    pub map_ks: Vec<usize>,
    #[arg(long = "recall-k", value_delimiter = ',')]
    pub recall_ks: Vec<usize>,
    #[arg(long = "subset-k", value_delimiter = ',')]
    pub subset_ks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Directory holding the indexed image files.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Event log and exported dataset location.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long)]
    pub bucket_quota: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub format: FormatArg,
    #[arg(long, required_unless_present = "json")]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    /// Ground truths retrieved by the method.
    #[arg(long)]
    pub found: u64,
    /// Ground truths labeled in total.
    #[arg(long)]
    pub labeled: u64,
    /// The method's recall at 100 on a fully labeled sample.
    #[arg(long)]
    pub recall: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv`, merging a `--config` file under the command-line flags.
pub fn parse(argv: &[OsString]) -> Result<Cli, Result<clap::Error, CliError>> {
    let matches = Cli::command().try_get_matches_from(argv).map_err(Ok)?;
    let cli = Cli::from_arg_matches(&matches).map_err(Ok)?;
    let Some(path) = cli.config.clone() else {
        return Ok(cli);
    };
    let command = matches.subcommand_name().expect("a subcommand is required").to_string();
    let extra = config::config_args(&path, &command).map_err(Err)?;
    let merged = config::splice_after_command(argv, &command, extra);
    let matches = Cli::command().try_get_matches_from(&merged).map_err(Ok)?;
    Cli::from_arg_matches(&matches).map_err(Ok)
}

/// Runs one invocation and returns the process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let cli = match parse(&argv) {
        Ok(cli) => cli,
        Err(Ok(e)) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
        Err(Err(e)) => {
            log::error!("{e}");
            return e.exit_code();
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}
