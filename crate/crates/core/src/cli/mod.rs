//! Command-line front end. Every command reads an optional JSON run config
//! (`--config`) whose fields can be overridden by flags, and stamps its
//! outputs with the effective seed and config hash.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while running.

mod commands;
mod config;
mod records;

pub use config::{RunConfig, RunPaths};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "mt-adapt",
    version,
    about = "Adapt a general translation model to a specialized domain"
)]
struct Cli {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a BPE tokenizer on both sides of a parallel corpus.
    TrainTokenizer(TrainTokenizerArgs),
    /// Append unseen characters of a corpus to a tokenizer, optionally
    /// growing a checkpoint's embeddings to match.
    ExpandVocab(ExpandVocabArgs),
    /// Write a synthetic keyword-stacked corpus.
    GenerateCorpus(GenerateCorpusArgs),
    /// Train a general model from scratch.
    Pretrain(PretrainArgs),
    /// Run vocabulary expansion and the two fine-tuning stages.
    Pipeline(PipelineArgs),
    /// Greedy-decode every source of a JSONL file.
    Translate(TranslateArgs),
    /// Score hypotheses against references joined by id.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct TrainTokenizerArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExpandVocabArgs {
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Parallel corpus whose characters are added.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Term-pair file whose characters are added.
    #[arg(long)]
    term_pairs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to resize alongside the tokenizer.
    #[arg(long, requires = "checkpoint_out")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    checkpoint_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Titles over general vocabulary only.
    General,
    /// Titles mixing domain terms with general fillers.
    Domain,
}

#[derive(Debug, Args)]
struct GenerateCorpusArgs {
    #[arg(long, value_enum, conflicts_with = "spec")]
    preset: Option<Preset>,
    /// Generator spec JSON (term lexicon, filler lexicon, stack range, seed).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// Number of domain terms for the domain preset.
    #[arg(long, default_value_t = 240)]
    term_count: usize,
    /// Where the domain preset writes its term pairs.
    #[arg(long)]
    terms_out: Option<PathBuf>,
    /// Hold out this many titles into `--test-out`.
    #[arg(long, requires = "test_out")]
    test_count: Option<usize>,
    #[arg(long, requires = "test_count")]
    test_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Skip vocabulary expansion.
    #[arg(long)]
    no_ev: bool,
    /// Skip the term-pair stage.
    #[arg(long)]
    no_tp: bool,
    /// Skip the parallel-corpus stage.
    #[arg(long)]
    no_pc: bool,
    /// Train with cross-entropy only.
    #[arg(long)]
    no_sse: bool,
    /// Run ablation rows A to D in sequence and score each on the test set.
    #[arg(long, conflicts_with_all = ["no_ev", "no_tp", "no_pc", "no_sse"])]
    ablate: bool,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// JSONL with `id` and `source` (or `text`) per line.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// JSONL with `id` and `text`.
    #[arg(long)]
    hyp: Option<PathBuf>,
    /// JSONL with `id` and `target` (or `text`).
    #[arg(long, alias = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes, mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(Vec<String>),
    Runtime(crate::Error),
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<Vec<String>> for CliError {
    fn from(problems: Vec<String>) -> Self {
        CliError::Usage(problems)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            match &err {
                CliError::Usage(problems) => {
                    for p in problems {
                        eprintln!("error: {p}");
                    }
                }
                CliError::Runtime(e) => eprintln!("error: {e}"),
            }
            err.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::LoadedConfig::load(cli.config.as_deref())?;
    cfg.set_seed(cli.seed);
    match cli.command {
        Command::TrainTokenizer(a) => commands::train_tokenizer(&cfg, a),
        Command::ExpandVocab(a) => commands::expand_vocab(&cfg, a),
        Command::GenerateCorpus(a) => commands::generate_corpus(&cfg, a, cli.seed),
        Command::Pretrain(a) => commands::pretrain(&cfg, a),
        Command::Pipeline(a) => commands::pipeline(cfg, a),
        Command::Translate(a) => commands::translate(&cfg, a),
        Command::Evaluate(a) => commands::evaluate(&cfg, a),
    }
}
