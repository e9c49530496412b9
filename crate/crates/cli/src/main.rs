//! `shortcut-audit` command-line front end.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 internal
//! invariant failure.

mod bundle;
mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shortcut_audit::corpus::{Split, Variant};
use shortcut_audit::par::Execution;
use shortcut_audit::stats::MIN_BOOTSTRAP;

#[derive(Debug, Parser)]
#[command(
    name = "shortcut-audit",
    version,
    about = "Shortcut-learning audit for animal re-identification embeddings"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Corpus manifest (JSON).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output root; each command writes into `<out>/<command>/`.
    #[arg(long, global = true, default_value = "audit-out")]
    pub out: PathBuf,
    /// Seed for bootstrap resampling, coreset tie-breaks and loss-check batches.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Significance level for the paired pipeline.
    #[arg(long, global = true, default_value_t = 0.05)]
    pub alpha: f64,
    /// Bootstrap resamples for correlation intervals.
    #[arg(long, global = true, default_value_t = 20_000)]
    pub bootstrap: usize,
    /// CMC cut-offs, ascending.
    #[arg(long, global = true, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    pub ks: Vec<usize>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

impl GlobalArgs {
    pub fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }

    fn validate(&self) -> Result<(), Failure> {
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Failure::usage("--ks must be strictly ascending positive integers"));
        }
        if self.bootstrap < MIN_BOOTSTRAP {
            return Err(Failure::usage(format!("--bootstrap must be at least {MIN_BOOTSTRAP}")));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Failure::usage("--alpha must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Selection {
    /// Restrict to these models (repeatable); default all.
    #[arg(long = "model")]
    pub models: Vec<String>,
    /// Restrict to these variants (repeatable); default all.
    #[arg(long = "variant")]
    pub variants: Vec<Variant>,
    /// Restrict images to one split.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Retrieval metrics per (model, variant).
    Eval(Selection),
    /// Background-context and laterality diagnostics per model.
    Audit(commands::AuditArgs),
    /// Within- versus cross-flank retrieval.
    Crossflank(Selection),
    /// Paired Wilcoxon / Fisher / Holm comparisons.
    Stats(commands::StatsArgs),
    /// Facility-location validation coreset.
    Coreset(commands::CoresetArgs),
    /// Mask solidity and variant images from RGBA PNGs.
    Masks(commands::MasksArgs),
    /// Finite-difference gradient checks of the training objectives.
    LossCheck(commands::LossCheckArgs),
    /// Near-duplicate pairs by cosine similarity.
    Dedup(commands::DedupArgs),
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Internal(String),
}

impl Failure {
    pub fn usage(m: impl Into<String>) -> Self {
        Failure::Usage(m.into())
    }

    pub fn data(m: impl Into<String>) -> Self {
        Failure::Data(m.into())
    }

    pub fn internal(m: impl Into<String>) -> Self {
        Failure::Internal(m.into())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Internal(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<shortcut_audit::Error> for Failure {
    fn from(e: shortcut_audit::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    g.validate()?;
    match &cli.command {
        Command::Eval(sel) => commands::eval(g, sel),
        Command::Audit(a) => commands::audit(g, a),
        Command::Crossflank(sel) => commands::crossflank(g, sel),
        Command::Stats(a) => commands::stats(g, a),
        Command::Coreset(a) => commands::coreset(g, a),
        Command::Masks(a) => commands::masks(g, a),
        Command::LossCheck(a) => commands::loss_check(g, a),
        Command::Dedup(a) => commands::dedup(g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("shortcut-audit: {f}");
            ExitCode::from(f.code())
        }
        Err(_) => ExitCode::from(3),
    }
}
