//! Synthetic spurious-correlation corpora.
//!
//! Every document carries exactly one *signal* token that determines its
//! label (the ground-truth rationale) and one *bias* token that merely
//! correlates with the label: with probability `bias_correlation` on the
//! train/dev/test splits and `shifted_correlation` on the shifted split.
//! All other positions are filler. A model that keys on the bias token
//! looks accurate in-distribution and falls apart on the shifted split.
//!
//! Token pools are named `sig{i}`, `bias{i}`, `fill{i}`; pool token `i`
//! belongs to class `i % num_classes`, identically in every split.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Document, Split};
use crate::{Error, Result};

fn default_num_classes() -> usize {
    2
}

/// Parameters for [`generate_synthetic`]. Serialized form is the JSON spec
/// file consumed by the `synth` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Pool sizes for the three token kinds.
    pub signal_vocab: usize,
    pub bias_vocab: usize,
    pub filler_vocab: usize,
    /// Tokens per document.
    pub sequence_length: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// P(bias token agrees with the label) on train/dev/test.
    pub bias_correlation: f64,
    /// Same probability on the shifted split; below 0.5 makes the bias
    /// token misleading there.
    pub shifted_correlation: f64,
    /// Fraction of train documents that keep their rationale mask.
    pub rationale_fraction: f64,
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    pub shifted_count: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.signal_vocab < c || self.bias_vocab < c {
            return Err(Error::Config(format!(
                "signal and bias pools need at least {} tokens (one per class)",
                c
            )));
        }
        if self.filler_vocab == 0 {
            return Err(Error::Config("filler pool must be nonempty".into()));
        }
        if self.sequence_length < 2 {
            return Err(Error::Config(
                "sequence_length must be at least 2 (signal and bias positions)".into(),
            ));
        }
        for (name, p) in [
            ("bias_correlation", self.bias_correlation),
            ("shifted_correlation", self.shifted_correlation),
            ("rationale_fraction", self.rationale_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::Config(format!("{} must lie in [0, 1]", name)));
            }
        }
        for (name, n) in [
            ("train_count", self.train_count),
            ("dev_count", self.dev_count),
            ("test_count", self.test_count),
            ("shifted_count", self.shifted_count),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        Ok(())
    }
}

/// The four generated corpora.
#[derive(Clone, Debug)]
pub struct SynthCorpora {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    pub shifted: Corpus,
}

/// Generates the four splits deterministically from the spec's seed.
/// Ground-truth rationales mark exactly the signal-token position; the
/// train split keeps them on a seeded `rationale_fraction` subset, the
/// other splits keep them everywhere (they are what credibility scoring
/// compares against).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SynthCorpora> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut make_split = |split: Split, count: usize, correlation: f64| -> Result<Corpus> {
        let name = match split {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Shifted => "shifted",
        };
        let mut documents = Vec::with_capacity(count);
        for n in 0..count {
            documents.push(make_doc(spec, correlation, &mut rng, format!("{}-{:05}", name, n)));
        }
        Corpus::new(documents, spec.num_classes, split)
    };

    let mut train = make_split(Split::Train, spec.train_count, spec.bias_correlation)?;
    let dev = make_split(Split::Dev, spec.dev_count, spec.bias_correlation)?;
    let test = make_split(Split::Test, spec.test_count, spec.bias_correlation)?;
    let shifted = make_split(Split::Shifted, spec.shifted_count, spec.shifted_correlation)?;

    let keep = (spec.rationale_fraction * train.len() as f64).round() as usize;
    let keep_set = rand::seq::index::sample(&mut rng, train.len(), keep.min(train.len()));
    let mut kept = vec![false; train.len()];
    for i in keep_set {
        kept[i] = true;
    }
    for (doc, keep) in train.documents.iter_mut().zip(&kept) {
        if !keep {
            doc.rationale = None;
        }
    }

    Ok(SynthCorpora { train, dev, test, shifted })
}

fn make_doc(spec: &SyntheticSpec, correlation: f64, rng: &mut ChaCha8Rng, id: String) -> Document {
    let c = spec.num_classes;
    let t = spec.sequence_length;
    let label = rng.gen_range(0..c);

    // Pool token i carries class i % c; draw uniformly within a class.
    let pick_from_class = |rng: &mut ChaCha8Rng, pool: usize, class: usize| {
        let per_class = pool / c + usize::from(class < pool % c);
        class + c * rng.gen_range(0..per_class)
    };

    let signal = pick_from_class(rng, spec.signal_vocab, label);
    let bias_class = if rng.gen_bool(correlation) {
        label
    } else {
        let other = rng.gen_range(0..c - 1);
        if other >= label {
            other + 1
        } else {
            other
        }
    };
    let bias = pick_from_class(rng, spec.bias_vocab, bias_class);

    let signal_pos = rng.gen_range(0..t);
    let bias_pos = {
        let p = rng.gen_range(0..t - 1);
        if p >= signal_pos {
            p + 1
        } else {
            p
        }
    };

    let mut tokens = Vec::with_capacity(t);
    let mut rationale = vec![0u8; t];
    for pos in 0..t {
        if pos == signal_pos {
            tokens.push(format!("sig{}", signal));
            rationale[pos] = 1;
        } else if pos == bias_pos {
            tokens.push(format!("bias{}", bias));
        } else {
            tokens.push(format!("fill{}", rng.gen_range(0..spec.filler_vocab)));
        }
    }

    Document { id, tokens, label, rationale: Some(rationale) }
}

/// How to degrade rationale masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptMode {
    /// Flip a ratio of the 0-entries to 1: irrelevant features get marked.
    InjectNoise,
    /// Flip a ratio of the 1-entries to 0: marked features go missing.
    Drop,
}

/// Returns a copy of the corpus with each rationale mask degraded. The
/// flip count per mask is `round(ratio * eligible entries)`, chosen by the
/// seeded generator. Documents without rationales pass through untouched.
pub fn corrupt_rationales(
    corpus: &Corpus,
    mode: CorruptMode,
    ratio: f64,
    seed: u64,
) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(Error::Contract(format!("corruption ratio {} outside [0, 1]", ratio)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut documents = corpus.documents.clone();
    for doc in &mut documents {
        let rationale = match &mut doc.rationale {
            Some(r) => r,
            None => continue,
        };
        let target = match mode {
            CorruptMode::InjectNoise => 0u8,
            CorruptMode::Drop => 1u8,
        };
        let slots: Vec<usize> = rationale
            .iter()
            .enumerate()
            .filter(|&(_, &v)| v == target)
            .map(|(i, _)| i)
            .collect();
        let flips = (ratio * slots.len() as f64).round() as usize;
        for chosen in rand::seq::index::sample(&mut rng, slots.len(), flips.min(slots.len())) {
            rationale[slots[chosen]] = 1 - target;
        }
    }
    Corpus::new(documents, corpus.num_classes, corpus.split)
}
