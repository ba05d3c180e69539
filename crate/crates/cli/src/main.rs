//! `gatenorm`: data-free attention sublayer scoring and pruning from the
//! command line.
//!
//! Every command writes its primary output to `--out` and a
//! `<out>.manifest.json` sidecar recording parameters and input hashes.
//!
//! Exit codes: 0 success, 2 usage error, 3 input-format or I/O error,
//! 4 contract violation.

mod commands;
mod manifest;

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gatenorm_core::memory::CountingAlloc;
use gatenorm_core::{Error, ErrorKind};
use serde::Serialize;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_CONTRACT: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    Io(PathBuf, io::Error),
    /// Checks ran but `--require-pass` was set and some failed.
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, e: io::Error) -> Self {
        CliError::Io(path.to_path_buf(), e)
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(..) => EXIT_INPUT,
            CliError::Core(e) => match e.kind() {
                ErrorKind::InputFormat | ErrorKind::Io => EXIT_INPUT,
                ErrorKind::Contract => EXIT_CONTRACT,
            },
            CliError::Failed(_) => EXIT_CONTRACT,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(path, e) => write!(f, "{}: {e}", path.display()),
            CliError::Failed(msg) => f.write_str(msg),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "gatenorm", version, about = "Data-free attention sublayer scoring and pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic checkpoint: a full toy model, or query/key tensors only with --shape.
    Synth(SynthArgs),
    /// Write a seeded synthetic token stream.
    Tokens(TokensArgs),
    /// Score every attention sublayer of a checkpoint by gate-norm.
    Score(ScoreArgs),
    /// Build a pruning plan.
    Plan(PlanArgs),
    /// Run a model with an optional plan and report perplexity and importances.
    Simulate(SimulateArgs),
    /// Evaluate perplexity for several plan methods and prune counts.
    Sweep(SweepArgs),
    /// Run the randomized bound-check suite.
    Validate(ValidateArgs),
    /// Time checkpoint scoring and track peak allocation.
    Bench(BenchArgs),
    /// Merge sweeps, plans, score tables and importance tables by layer.
    Report(ReportArgs),
}

/// Where a model comes from: a checkpoint, or a seeded toy model.
#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Checkpoint to load; its config comes from --config or its metadata.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "llama")]
    pub naming_scheme: String,
    /// Model config JSON. Without --checkpoint, a random model is drawn from it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Planted suppression for random models, as L:t[,L:t...].
    #[arg(long, default_value = "")]
    pub suppress: String,
}

/// Evaluation tokens: a stream file or a seeded synthetic stream.
#[derive(Debug, Args, Serialize)]
pub struct StreamArgs {
    #[arg(long)]
    pub stream: Option<PathBuf>,
    /// Tokens in the synthetic stream used when --stream is absent.
    #[arg(long, default_value_t = 2048)]
    pub tokens: usize,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ModeArgs {
    /// whole or per-head (per-head:H also accepted).
    #[arg(long, default_value = "whole")]
    pub mode: String,
    /// Query head count for per-head scoring and grouped keys.
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Query/key-only checkpoint of shape L:D[:KV] instead of a full model.
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "")]
    pub suppress: String,
    /// f32, f16 or bf16.
    #[arg(long, default_value = "f32")]
    pub dtype: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TokensArgs {
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 2048)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "llama")]
    pub naming_scheme: String,
    #[command(flatten)]
    pub mode: ModeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    /// Score table from `score`; enough for gate-norm and random plans.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub stream: StreamArgs,
    #[command(flatten)]
    pub mode: ModeArgs,
    /// gate-norm, data-attn, data-block, random-attn or random-block.
    #[arg(long, default_value = "gate-norm")]
    pub method: String,
    #[arg(short = 'N', long = "count")]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub stream: StreamArgs,
    #[command(flatten)]
    pub mode: ModeArgs,
    /// Plan document to apply; none evaluates the unpruned model only.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Mean-center activations before the cosine measures.
    #[arg(long)]
    pub centered: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the importance table as CSV.
    #[arg(long)]
    pub importance_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub stream: StreamArgs,
    #[command(flatten)]
    pub mode: ModeArgs,
    /// Comma-separated methods; all five by default.
    #[arg(long)]
    pub methods: Option<String>,
    /// Comma-separated prune counts; 0..=L by default.
    #[arg(long)]
    pub counts: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    /// Suite config JSON; defaults are used for absent files.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Logit-bound trials and law-of-cosines pairs.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Softmax rows per epsilon and update-decomposition rows.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Models in the query-scaling sweep.
    #[arg(long)]
    pub sweep_models: Option<usize>,
    /// Inject a known fault: negated-stabilizer.
    #[arg(long)]
    pub fault: Option<String>,
    /// Exit 4 when any check fails.
    #[arg(long)]
    pub require_pass: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Existing checkpoint to score instead of a synthetic one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "llama")]
    pub naming_scheme: String,
    /// Synthetic query/key shape L:D[:KV].
    #[arg(long, default_value = "8:2048")]
    pub shape: String,
    #[arg(long, default_value = "f16")]
    pub dtype: String,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layer counts for the scaling regression, e.g. 4,8,16,32.
    #[arg(long)]
    pub scaling: Option<String>,
    /// Width used by the scaling regression.
    #[arg(long, default_value_t = 1024)]
    pub scaling_dim: usize,
    /// Sequence lengths for a sublayer timing profile, e.g. 512,4096.
    #[arg(long)]
    pub profile_lengths: Option<String>,
    /// Width of the profiled toy model.
    #[arg(long, default_value_t = 512)]
    pub profile_dim: usize,
    #[arg(long, default_value_t = 5)]
    pub profile_runs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Sweep documents, plans, score tables or importance tables.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Tokens(a) => commands::tokens(&a),
        Command::Score(a) => commands::score(&a),
        Command::Plan(a) => commands::plan(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Validate(a) => commands::validate(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gatenorm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
