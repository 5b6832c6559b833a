//! Command-line front end: synthetic streams, fusion runs, gradient checks,
//! ablation sweeps, benchmark scoring and throughput measurement.
//!
//! Every command is a plain function writing its human-readable summary to
//! a caller-supplied sink, so the binary is a thin wrapper around [`run`].

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use cgmf_core::gradcheck::GradcheckError;
use cgmf_core::io::{ConfigFile, IoError};
use cgmf_core::metrics::ScoreError;
use cgmf_core::{FusionConfig, FusionError, Toggles};

mod commands;

pub use commands::{
    ablate, bench, fuse_manifest, gen, gradcheck, init, score, AblationRow, AblationTable,
    BenchStats, InputSource, RunManifest,
};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    /// File system and other runtime failures.
    pub const RUNTIME: i32 = 1;
    /// Bad command-line usage.
    pub const USAGE: i32 = 2;
    /// Invalid config, mismatched shapes, malformed records.
    pub const VALIDATION: i32 = 3;
    /// A check ran and failed (gradient check above tolerance).
    pub const CHECK_FAILED: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Gradcheck(#[from] GradcheckError),
    #[error("gradient check failed: {0}")]
    CheckFailed(String),
    #[error("writing output: {0}")]
    Output(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    Threads(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
            CliError::Io(IoError::File { .. }) => exit::RUNTIME,
            CliError::Io(_) | CliError::Fusion(_) => exit::VALIDATION,
            CliError::Score(ScoreError::Io { .. }) => exit::RUNTIME,
            CliError::Score(_) => exit::VALIDATION,
            CliError::Gradcheck(GradcheckError::Fusion(_)) => exit::VALIDATION,
            CliError::Gradcheck(GradcheckError::TooLarge { .. }) => exit::VALIDATION,
            CliError::Gradcheck(GradcheckError::UnknownGroup(_)) => exit::USAGE,
            CliError::Output(_) | CliError::Threads(_) => exit::RUNTIME,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "cgmf", version, about = "Camera-guided modality fusion toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic token-stream container.
    Gen(GenArgs),
    /// Write freshly initialized weights.
    Init(InitArgs),
    /// Run fusion and write the fused tokens.
    Fuse(FuseArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Run the four fusion variants on the same inputs.
    Ablate(AblateArgs),
    /// Score a prediction file.
    Score(ScoreArgs),
    /// Time repeated fusion passes.
    Bench(BenchArgs),
}

/// Model shape and the switches that disable individual sub-modules.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// TOML config file; defaults depend on the command.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub no_geo_bias: bool,
    #[arg(long)]
    pub no_token_weight: bool,
    #[arg(long)]
    pub no_camera_memory: bool,
    #[arg(long)]
    pub no_gate: bool,
}

impl ModelArgs {
    /// Config file (or `default`) with the command-line toggles applied.
    /// Also returns the seed recorded in the file, if any.
    pub fn resolve(&self, default: FusionConfig) -> Result<(FusionConfig, Option<u64>)> {
        let (mut config, seed) = match &self.config {
            Some(path) => {
                let file = ConfigFile::read(path)?;
                (file.config(), file.seed)
            }
            None => (default, None),
        };
        let t = &mut config.toggles;
        t.enable_geo_bias &= !self.no_geo_bias;
        t.enable_token_weight &= !self.no_token_weight;
        t.enable_camera_memory &= !self.no_camera_memory;
        t.enable_gate &= !self.no_gate;
        config.validate().map_err(IoError::from)?;
        Ok((config, seed))
    }

    pub fn toggles_only(toggles: Toggles) -> Self {
        Self {
            no_geo_bias: !toggles.enable_geo_bias,
            no_token_weight: !toggles.enable_token_weight,
            no_camera_memory: !toggles.enable_camera_memory,
            no_gate: !toggles.enable_gate,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Distribution {
    Gaussian,
    UnitSphere,
}

impl From<Distribution> for cgmf_core::pipeline::TokenDistribution {
    fn from(d: Distribution) -> Self {
        match d {
            Distribution::Gaussian => Self::Gaussian,
            Distribution::UnitSphere => Self::UnitSphere,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Defaults to the config file's seed, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub distribution: Distribution,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Zero the lifting projection so fusion starts as the identity on f_v.
    #[arg(long)]
    pub near_identity: bool,
    /// Zero the first gate projection; the gate output is then exactly zero.
    #[arg(long)]
    pub zero_gate: bool,
    /// Store values as 32-bit floats.
    #[arg(long)]
    pub f32: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["input", "seed"])))]
pub struct FuseArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Token-stream container produced by `gen`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Generate the input streams from this seed instead of reading a file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weights container; freshly initialized from `--init-seed` if absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = cgmf_core::gradcheck::DEFAULT_STEP)]
    pub step: f64,
    /// Test hook: scale the analytic gradient of this group by 1.01.
    #[arg(long, hide = true)]
    pub corrupt_vjp: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Also write the table as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolName {
    Vsi,
    Sqa3d,
    Spbench,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    /// Line-delimited JSON prediction records.
    pub records: PathBuf,
    #[arg(long, value_enum)]
    pub protocol: ProtocolName,
    /// Use containment matching for free-text answers.
    #[arg(long)]
    pub refined: bool,
    /// Report file; defaults to `<records>.report.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Also write the statistics as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs one parsed command.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a, out),
        Command::Init(a) => init(&a, out),
        Command::Fuse(a) => fuse_manifest(&RunManifest::from_args(&a)?, out).map(drop),
        Command::Gradcheck(a) => gradcheck(&a, out).map(drop),
        Command::Ablate(a) => ablate(&a, out).map(drop),
        Command::Score(a) => score(&a, out),
        Command::Bench(a) => bench(&a, out).map(drop),
    }
}

/// `<path>.report.json` next to the input.
pub(crate) fn sibling_report(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".report.json");
    path.with_file_name(name)
}
