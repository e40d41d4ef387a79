//! Command-line front end: `generate`, `train`, `eval`, `compare` and
//! `analyze`, each driven by one JSON config and writing into one run
//! directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] subnet_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2: bad configuration or input contract, 3: numeric failure,
    /// 4: file system, parse or checkpoint problems.
    pub fn exit_code(&self) -> i32 {
        use subnet_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Exists(_) => 4,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(E::Io { .. } | E::Parse { .. } | E::CheckpointVersion { .. } | E::CorruptCheckpoint(_)) => 4,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "subnet", version, about = "State-space system identification with a subspace encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/validation/test records from the benchmark system.
    Generate(CommonArgs),
    /// Train a model and save the best checkpoint.
    Train(CommonArgs),
    /// Evaluate a checkpoint: simulation NRMS and k-step profile.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Largest prediction horizon of the k-step profile.
        #[arg(long)]
        kmax: Option<usize>,
    },
    /// Train the baseline variants under a shared time budget.
    Compare(CommonArgs),
    /// Overlap statistics: analytic G(d) and Monte-Carlo variances.
    Analyze(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory (overrides `out` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

impl Command {
    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::Generate(c) | Command::Train(c) | Command::Compare(c) | Command::Analyze(c) => c,
            Command::Eval { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Eval { .. } => "eval",
            Command::Compare(_) => "compare",
            Command::Analyze(_) => "analyze",
        }
    }
}

/// Loads the config and applies command-line overrides.
pub fn resolve_config(command: &Command) -> Result<RunConfig, CliError> {
    let args = command.common();
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Command::Eval { kmax: Some(k), .. } = command {
        cfg.eval.k_max = *k;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command and returns the lines to print on success.
pub fn run(cli: &Cli) -> Result<Vec<String>, CliError> {
    let cfg = resolve_config(&cli.command)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let force = cli.command.common().force;
    let ctx = commands::RunDir::open(&out, cli.command.name(), force)?;
    ctx.write_config(&cfg)?;
    match &cli.command {
        Command::Generate(_) => commands::generate(&cfg, &ctx),
        Command::Train(_) => commands::train(&cfg, &ctx),
        Command::Eval { .. } => commands::eval(&cfg, &ctx),
        Command::Compare(_) => commands::compare(&cfg, &ctx),
        Command::Analyze(_) => commands::analyze(&cfg, &ctx),
    }
}
