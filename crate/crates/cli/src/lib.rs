//! The `s2a` command-line harness.
//!
//! Exit codes: 0 success, 1 verification or numeric failure, 2 usage or
//! configuration error.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use s2a_core::backbone::VariantConfig;

mod commands;

pub use commands::*;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "s2a", version, about = "Strip attention backbone: cost model, gradient checks, benchmarks and toy training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-stage layout, parameter and MAC totals of a variant.
    Describe(DescribeArgs),
    /// Check the closed-form cost identities on every stage shape.
    VerifyCost(VerifyCostArgs),
    /// Compare backward() with central differences on a tiny block.
    Gradcheck(GradcheckArgs),
    /// Time a token mixer forward pass.
    Bench(BenchArgs),
    /// Overfit a small model on synthetic blobs and write the loss trace.
    TrainToy(TrainToyArgs),
    /// Write freshly initialized weights as a parameter manifest.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct ModelArgs {
    /// One of mini, T, XS, S, M.
    #[arg(long)]
    pub variant: Option<String>,
    /// Path to a JSON variant configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Square input resolution.
    #[arg(long, default_value_t = 224)]
    pub res: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Include every layer.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct VerifyTarget {
    /// A variant name or `all`.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyCostArgs {
    #[command(flatten)]
    pub target: VerifyTarget,
    #[arg(long, default_value_t = 224)]
    pub res: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Adds one MAC to every counted value (exercises the failure path).
    #[arg(long, hide = true)]
    pub corrupt_counter: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModuleArg {
    Ssa,
    Lim,
    Hpb,
    Backbone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    pub module: ModuleArg,
    #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
    pub dtype: DTypeArg,
    /// Largest accepted relative error per parameter group.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, env = "S2A_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    /// Coordinates probed per group (module default when omitted).
    #[arg(long)]
    pub max_coords: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MixerArg {
    Ssa,
    Mhsa,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchOut {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = MixerArg::Ssa)]
    pub mixer: MixerArg,
    /// Tokens per image.
    #[arg(long, default_value_t = 3136)]
    pub n: usize,
    #[arg(long, default_value_t = 48)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Spatial reduction ratio (strip attention only).
    #[arg(long, default_value_t = 8)]
    pub sr: usize,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub iters: u64,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, value_enum, default_value_t = BenchOut::Csv)]
    pub out: BenchOut,
    /// Write records here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, env = "S2A_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long, env = "S2A_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Square image size; must be a multiple of 32.
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    /// Loss trace CSV path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the trained weights as a manifest.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, env = "S2A_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    pub dtype: DTypeArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_USAGE, error: e.into() }
    }

    pub fn failure(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_FAILURE, error: e.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<s2a_core::Error> for CliError {
    fn from(e: s2a_core::Error) -> Self {
        use s2a_core::Error as E;
        match e {
            E::Config(_) | E::Parameter(_) | E::Dimension(_) => Self::usage(e),
            E::Contract(_) | E::State(_) | E::Numeric(_) | E::Range(_) | E::Format(_) => Self::failure(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::failure(e)
    }
}

pub type CmdResult = Result<(), CliError>;

impl ModelArgs {
    pub fn resolve(&self) -> Result<VariantConfig, CliError> {
        match (&self.variant, &self.config) {
            (Some(name), _) => Ok(VariantConfig::named(name)?),
            (None, Some(path)) => load_config(path),
            (None, None) => Err(CliError::usage(anyhow::anyhow!("pass --variant or --config"))),
        }
    }
}

pub fn load_config(path: &std::path::Path) -> Result<VariantConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(anyhow::anyhow!("cannot read {}: {e}", path.display())))?;
    let cfg: VariantConfig =
        serde_json::from_str(&text).map_err(|e| CliError::usage(anyhow::anyhow!("invalid config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed command, writing reports to `out` and diagnostics to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    match cli.command {
        Command::Describe(a) => describe(&a, out),
        Command::VerifyCost(a) => verify_cost(&a, out, err),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::Bench(a) => bench(&a, out),
        Command::TrainToy(a) => train_toy(&a, out, err),
        Command::Export(a) => export(&a, out),
    }
}
