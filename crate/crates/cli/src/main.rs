//! `crex`: train, evaluate, and explain rationale-regularized text
//! classifiers.
//!
//! Every subcommand reads a JSON config (or spec) file; command-line flags
//! override the file's values, and the resolved effective config is
//! printed before the run so any run can be reproduced from its log.
//! Exit codes: 0 success, 1 invalid configuration or input, 2 runtime
//! failure (for example a diverged training run).

mod jobs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crex_core::explain::Granularity;
use crex_core::train::TrainMode;
use crex_core::Error;

#[derive(Parser)]
#[command(name = "crex", version, about = "Rationale-regularized text classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Score credibility and per-split accuracy for a checkpoint.
    Eval(EvalArgs),
    /// Dump per-instance omission explanations as JSON lines.
    Explain(ExplainArgs),
    /// Generate the four synthetic spurious-correlation corpora.
    Synth(SynthArgs),
    /// Remove keyword-bearing sentences from a corpus.
    Filter(FilterArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// vanilla, crex, or rationale_augment.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "phrase-m")]
    phrase_m: Option<usize>,
    /// word or sentence.
    #[arg(long, value_parser = parse_granularity)]
    granularity: Option<Granularity>,
    /// Keep rationales on this fraction of annotated training documents.
    #[arg(long = "rationale-fraction")]
    rationale_fraction: Option<f64>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the config this many times with consecutive seeds, writing each
    /// run into run-<k>/ under the output directory.
    #[arg(long, default_value_t = 1)]
    repeats: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "phrase-m")]
    phrase_m: Option<usize>,
    #[arg(long, value_parser = parse_granularity)]
    granularity: Option<Granularity>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one CSV row per scored instance.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct ExplainArgs {
    /// Explanation config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "phrase-m")]
    phrase_m: Option<usize>,
    #[arg(long, value_parser = parse_granularity)]
    granularity: Option<Granularity>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic corpus spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Directory for train/dev/test/shifted JSONL files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "rationale-fraction")]
    rationale_fraction: Option<f64>,
}

#[derive(Args)]
struct FilterArgs {
    /// Filter config JSON (corpus path and keyword list).
    #[arg(long)]
    config: PathBuf,
    /// Output corpus path (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "vanilla" => Ok(TrainMode::Vanilla),
        "crex" => Ok(TrainMode::Crex),
        "rationale_augment" => Ok(TrainMode::RationaleAugment),
        other => Err(format!("unknown mode {} (vanilla|crex|rationale_augment)", other)),
    }
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    match s {
        "word" => Ok(Granularity::Word),
        "sentence" => Ok(Granularity::Sentence),
        other => Err(format!("unknown granularity {} (word|sentence)", other)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            if e.use_stderr() {
                eprint!("{}", e);
                return ExitCode::from(1);
            }
            print!("{}", e);
            return ExitCode::SUCCESS;
        }
    };

    let result = match cli.command {
        Command::Train(args) => jobs::run_train(args),
        Command::Eval(args) => jobs::run_eval(args),
        Command::Explain(args) => jobs::run_explain(args),
        Command::Synth(args) => jobs::run_synth(args),
        Command::Filter(args) => jobs::run_filter(args),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Diverged { .. } | Error::Io(_) => 2,
        _ => 1,
    }
}
