//! Subcommand implementations: config loading, flag overrides, and the
//! wiring from files to the library calls.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crex_core::data::{load_corpus, Corpus, Split};
use crex_core::eval::{adversarial_filter, credibility, generalization_report};
use crex_core::explain::{omission_explain_doc, ExplainConfig, Granularity};
use crex_core::models::load_checkpoint;
use crex_core::tensor::Tape;
use crex_core::train::{argmax, train, TrainConfig};
use crex_core::{Error, Result};

use crate::{EvalArgs, ExplainArgs, FilterArgs, SynthArgs, TrainArgs};

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("malformed config {}: {}", path.display(), e)))
}

fn banner<T: Serialize>(label: &str, config: &T) -> Result<()> {
    println!("{} config: {}", label, serde_json::to_string(config)?);
    Ok(())
}

fn split_for(name: &str) -> Split {
    match name {
        "train" => Split::Train,
        "dev" => Split::Dev,
        "shifted" => Split::Shifted,
        _ => Split::Test,
    }
}

pub fn run_train(args: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(v) = args.lambda1 {
        config.lambda1 = Some(v);
    }
    if let Some(v) = args.lambda2 {
        config.lambda2 = Some(v);
    }
    if let Some(v) = args.alpha {
        config.alpha = Some(v);
    }
    if let Some(v) = args.beta {
        config.beta = Some(v);
    }
    if let Some(v) = args.phrase_m {
        config.phrase_m = v;
    }
    if let Some(v) = args.granularity {
        config.granularity = v;
    }
    if let Some(v) = args.rationale_fraction {
        config.rationale_fraction = Some(v);
    }
    if let Some(out) = args.out {
        config.out_dir = Some(out);
    }

    let out_dir = config
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("train needs an output directory (out_dir or --out)".into()))?;
    let train_path = config
        .train_path
        .clone()
        .ok_or_else(|| Error::Config("train config needs train_path".into()))?;
    let dev_path = config
        .dev_path
        .clone()
        .ok_or_else(|| Error::Config("train config needs dev_path".into()))?;

    let classes = config.model.num_classes;
    let train_corpus = load_corpus(&train_path, classes, Split::Train)?;
    let dev_corpus = load_corpus(&dev_path, classes, Split::Dev)?;

    if args.repeats <= 1 {
        return run_one_training(&config, &train_corpus, &dev_corpus, &out_dir);
    }
    for k in 0..args.repeats {
        let mut run = config.clone();
        run.seed = config.seed + k;
        let run_dir = out_dir.join(format!("run-{}", k));
        run.out_dir = Some(run_dir.clone());
        run_one_training(&run, &train_corpus, &dev_corpus, &run_dir)?;
    }
    Ok(())
}

fn run_one_training(
    config: &TrainConfig,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    out_dir: &Path,
) -> Result<()> {
    banner("train", config)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("effective-config.json"),
        serde_json::to_vec_pretty(config)?,
    )?;
    let outcome = train(config, train_corpus, dev_corpus)?;
    println!(
        "best epoch {} with dev accuracy {:.4}; checkpoint at {}",
        outcome.best_epoch,
        outcome.best_dev_accuracy,
        out_dir.join("best.ckpt").display()
    );
    Ok(())
}

/// Evaluation job description.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalJob {
    pub checkpoint: PathBuf,
    /// Split name to corpus path; accuracy is reported for each.
    pub splits: BTreeMap<String, PathBuf>,
    /// Which split to score credibility on; defaults to "test" when present.
    #[serde(default)]
    pub credibility_split: Option<String>,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_phrase_m")]
    pub phrase_m: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_granularity() -> Granularity {
    Granularity::Word
}
fn default_phrase_m() -> usize {
    3
}

#[derive(Debug, Serialize)]
struct EvalReport {
    credibility: Option<crex_core::CredibilityReport>,
    generalization: crex_core::eval::GeneralizationReport,
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    let mut job: EvalJob = read_config(&args.config)?;
    if let Some(v) = args.phrase_m {
        job.phrase_m = v;
    }
    if let Some(v) = args.granularity {
        job.granularity = v;
    }
    if let Some(v) = args.out {
        job.out = Some(v);
    }
    banner("eval", &job)?;

    let ckpt = load_checkpoint(&job.checkpoint)?;
    let classes = ckpt.model.config.num_classes;
    let mut corpora = Vec::new();
    for (name, path) in &job.splits {
        corpora.push((name.clone(), load_corpus(path, classes, split_for(name))?));
    }
    let split_refs: Vec<(String, &Corpus)> =
        corpora.iter().map(|(n, c)| (n.clone(), c)).collect();
    let generalization =
        generalization_report(&ckpt.model, &ckpt.vocab, ckpt.max_len, &split_refs)?;

    let explain_cfg = ExplainConfig { granularity: job.granularity, phrase_m: job.phrase_m };
    let scored_split = job
        .credibility_split
        .clone()
        .or_else(|| corpora.iter().any(|(n, _)| n == "test").then(|| "test".to_string()));
    let credibility_report = match scored_split {
        Some(name) => {
            let corpus = corpora
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, c)| c)
                .ok_or_else(|| {
                    Error::Config(format!("credibility split {} not among the splits", name))
                })?;
            Some(credibility(&ckpt.model, corpus, &ckpt.vocab, ckpt.max_len, &explain_cfg)?)
        }
        None => None,
    };

    for (name, acc) in &generalization.accuracy {
        println!("accuracy[{}] = {:.4}", name, acc);
    }
    if let Some(gap) = generalization.gap {
        println!("generalization gap (test - shifted) = {:.4}", gap);
    }
    if let Some(report) = &credibility_report {
        println!(
            "credibility: mean symKL {:.4} over {} instances ({} skipped)",
            report.mean_sym_kl, report.scored, report.skipped
        );
    }

    if let Some(out) = &job.out {
        std::fs::create_dir_all(out)?;
        let report = EvalReport { credibility: credibility_report, generalization };
        std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        if args.csv {
            if let Some(c) = &report.credibility {
                let mut file = std::fs::File::create(out.join("credibility.csv"))?;
                writeln!(file, "id,sym_kl")?;
                for row in &c.per_instance {
                    writeln!(file, "{},{}", row.id, row.sym_kl)?;
                }
            }
        }
        println!("report written to {}", out.join("report.json").display());
    }
    Ok(())
}

/// Explanation-dump job description.
#[derive(Debug, Serialize, Deserialize)]
pub struct ExplainJob {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_phrase_m")]
    pub phrase_m: usize,
    /// Explain only the first N documents.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct UnitScores {
    start: usize,
    end: usize,
    tokens: Vec<String>,
    scores: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct ExplanationRecord {
    id: String,
    predicted_class: usize,
    probabilities: Vec<f64>,
    granularity: Granularity,
    units: Vec<UnitScores>,
}

pub fn run_explain(args: ExplainArgs) -> Result<()> {
    let mut job: ExplainJob = read_config(&args.config)?;
    if let Some(v) = args.phrase_m {
        job.phrase_m = v;
    }
    if let Some(v) = args.granularity {
        job.granularity = v;
    }
    if let Some(v) = args.out {
        job.out = Some(v);
    }
    banner("explain", &job)?;

    let ckpt = load_checkpoint(&job.checkpoint)?;
    let corpus = load_corpus(&job.corpus, ckpt.model.config.num_classes, Split::Test)?;
    let explain_cfg = ExplainConfig { granularity: job.granularity, phrase_m: job.phrase_m };
    let limit = job.limit.unwrap_or(usize::MAX);

    let mut writer: Box<dyn Write> = match &job.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Box::new(std::fs::File::create(dir.join("explanations.jsonl"))?)
        }
        None => Box::new(std::io::stdout()),
    };

    for doc in corpus.documents.iter().take(limit) {
        let enc = crex_core::data::encode(doc, &ckpt.vocab, ckpt.max_len);
        let mut tape = Tape::new();
        let bound = ckpt.model.bind(&mut tape);
        let expl = omission_explain_doc(&mut tape, &bound, &enc, &explain_cfg)?;
        let probabilities = tape.value(expl.reference).values().to_vec();
        let scores = tape.value(expl.scores);
        let classes = scores.cols();
        let units = expl
            .spans
            .iter()
            .enumerate()
            .map(|(u, span)| UnitScores {
                start: span.start,
                end: span.end,
                tokens: doc.tokens[span.start..span.end].to_vec(),
                scores: scores.values()[u * classes..(u + 1) * classes].to_vec(),
            })
            .collect();
        let record = ExplanationRecord {
            id: doc.id.clone(),
            predicted_class: argmax(&probabilities),
            probabilities,
            granularity: job.granularity,
            units,
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    if let Some(dir) = &job.out {
        println!("explanations written to {}", dir.join("explanations.jsonl").display());
    }
    Ok(())
}

pub fn run_synth(args: SynthArgs) -> Result<()> {
    let mut spec: crex_core::SyntheticSpec = read_config(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(f) = args.rationale_fraction {
        spec.rationale_fraction = f;
    }
    banner("synth", &spec)?;

    let corpora = crex_core::data::generate_synthetic(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    for (name, corpus) in [
        ("train", &corpora.train),
        ("dev", &corpora.dev),
        ("test", &corpora.test),
        ("shifted", &corpora.shifted),
    ] {
        let path = args.out.join(format!("{}.jsonl", name));
        corpus.save(&path)?;
        println!("{}: {} documents -> {}", name, corpus.len(), path.display());
    }
    Ok(())
}

/// Keyword-filter job description.
#[derive(Debug, Serialize, Deserialize)]
pub struct FilterJob {
    pub corpus: PathBuf,
    pub keywords: Vec<String>,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_num_classes() -> usize {
    2
}

pub fn run_filter(args: FilterArgs) -> Result<()> {
    let mut job: FilterJob = read_config(&args.config)?;
    if let Some(out) = args.out {
        job.out = Some(out);
    }
    banner("filter", &job)?;

    let out = job
        .out
        .clone()
        .ok_or_else(|| Error::Config("filter needs an output path (out or --out)".into()))?;
    let corpus = load_corpus(&job.corpus, job.num_classes, Split::Test)?;
    let (filtered, dropped) = adversarial_filter(&corpus, &job.keywords)?;
    filtered.save(&out)?;
    println!(
        "kept {} of {} documents ({} dropped as fully matching) -> {}",
        filtered.len(),
        corpus.len(),
        dropped,
        out.display()
    );
    Ok(())
}
