//! The training loop: epoch iteration, seeded minibatching, adaptive-moment
//! updates on the joint objective, per-epoch validation accuracy, and
//! best-on-validation model selection.
//!
//! One seed controls the whole run: model initialization uses it directly,
//! shuffling and dropout draw from `seed + 1`, and rationale subsetting
//! from `seed + 2`. Identical configs therefore produce identical
//! checkpoints and metrics, bit for bit.

use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment_with_rationales, corrupt_rationales, encode_corpus, Corpus, CorruptMode, EncodedDoc,
    Vocabulary,
};
use crate::explain::{ExplainConfig, Granularity};
use crate::losses::{total_loss, HyperParams};
use crate::models::{save_checkpoint, Model, ModelConfig};
use crate::tensor::{AdamState, Tape, Tensor};
use crate::{Error, Result};

/// Training regime. `vanilla` optimizes cross-entropy only;
/// `rationale_augment` appends rationale-extracted copies of annotated
/// documents and then trains as vanilla; `crex` adds the explanation
/// regularizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Vanilla,
    Crex,
    RationaleAugment,
}

/// Optional rationale degradation applied to the training corpus before
/// the run (for knowledge-quality studies).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mode: CorruptMode,
    pub ratio: f64,
    pub seed: u64,
}

fn default_phrase_m() -> usize {
    3
}
fn default_granularity() -> Granularity {
    Granularity::Word
}
fn default_learning_rate() -> f64 {
    1e-2
}
fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    16
}
fn default_max_len() -> usize {
    64
}
fn default_min_frequency() -> usize {
    1
}

/// Everything a training run needs. The serialized form is the config file
/// the CLI consumes; unset hyperparameters resolve to per-architecture
/// defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mode: TrainMode,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[serde(default)]
    pub lambda2: Option<f64>,
    #[serde(default = "default_phrase_m")]
    pub phrase_m: usize,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_min_frequency")]
    pub min_frequency: usize,
    /// When set, keep rationales on this seeded fraction of the annotated
    /// training documents and strip the rest before training.
    #[serde(default)]
    pub rationale_fraction: Option<f64>,
    #[serde(default)]
    pub rationale_corruption: Option<CorruptionSpec>,
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub dev_path: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub save_epoch_checkpoints: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, mode: TrainMode) -> Self {
        TrainConfig {
            model,
            mode,
            alpha: None,
            beta: None,
            lambda1: None,
            lambda2: None,
            phrase_m: default_phrase_m(),
            granularity: default_granularity(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            max_len: default_max_len(),
            min_frequency: default_min_frequency(),
            rationale_fraction: None,
            rationale_corruption: None,
            train_path: None,
            dev_path: None,
            out_dir: None,
            save_epoch_checkpoints: false,
        }
    }

    /// Hyperparameters with per-architecture defaults filled in. Vanilla
    /// and rationale-augment modes force both regularizer weights to zero.
    pub fn resolved_hyperparams(&self) -> HyperParams {
        let defaults = HyperParams::defaults_for(self.model.arch);
        let mut hp = HyperParams {
            alpha: self.alpha.unwrap_or(defaults.alpha),
            beta: self.beta.unwrap_or(defaults.beta),
            lambda1: self.lambda1.unwrap_or(defaults.lambda1),
            lambda2: self.lambda2.unwrap_or(defaults.lambda2),
        };
        if self.mode != TrainMode::Crex {
            hp.lambda1 = 0.0;
            hp.lambda2 = 0.0;
        }
        hp
    }

    pub fn explain_config(&self) -> ExplainConfig {
        ExplainConfig { granularity: self.granularity, phrase_m: self.phrase_m }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.phrase_m == 0 {
            return Err(Error::Config("phrase_m must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(f) = self.rationale_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "rationale_fraction {} outside [0, 1]",
                    f
                )));
            }
        }
        if self.model.conv_widths.iter().any(|&w| w > self.max_len) {
            return Err(Error::Config(format!(
                "conv widths {:?} exceed max_len {}",
                self.model.conv_widths, self.max_len
            )));
        }
        self.resolved_hyperparams().validate()
    }
}

/// Per-epoch summary, one JSON line each in the metrics log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_supervised: f64,
    pub mean_rationale: f64,
    pub mean_sparse: f64,
    pub mean_total: f64,
    pub dev_accuracy: f64,
    pub seconds: f64,
    pub omission_forwards: usize,
}

/// Per-step loss record; the acceptance checks compare these across modes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub supervised: f64,
    pub rationale: f64,
    pub sparse: f64,
    pub total: f64,
    pub omission_forwards: usize,
}

/// Result of a training run: the best-on-validation model and the logs.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub vocab: Vocabulary,
    pub metrics: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub effective_train_size: usize,
}

/// Applies rationale subsetting, corruption, and augmentation, in that
/// order, producing the corpus the run actually trains on.
pub fn prepare_train_corpus(config: &TrainConfig, corpus: &Corpus) -> Result<Corpus> {
    let mut out = corpus.clone();
    if let Some(fraction) = config.rationale_fraction {
        let holders: Vec<usize> = out
            .documents
            .iter()
            .enumerate()
            .filter(|(_, d)| d.rationale.is_some())
            .map(|(i, _)| i)
            .collect();
        let keep = ((fraction * holders.len() as f64).round() as usize).min(holders.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
        let chosen = rand::seq::index::sample(&mut rng, holders.len(), keep);
        let keep_set: std::collections::HashSet<usize> =
            chosen.iter().map(|i| holders[i]).collect();
        for (i, doc) in out.documents.iter_mut().enumerate() {
            if doc.rationale.is_some() && !keep_set.contains(&i) {
                doc.rationale = None;
            }
        }
    }
    if let Some(c) = &config.rationale_corruption {
        out = corrupt_rationales(&out, c.mode, c.ratio, c.seed)?;
    }
    if config.mode == TrainMode::RationaleAugment {
        out = augment_with_rationales(&out)?;
    }
    Ok(out)
}

/// Runs the full loop and returns the checkpoint with the highest dev
/// accuracy (earliest epoch on ties). Aborts with [`Error::Diverged`] when
/// a step produces a non-finite loss.
pub fn train(config: &TrainConfig, train_corpus: &Corpus, dev_corpus: &Corpus) -> Result<TrainOutcome> {
    config.validate()?;
    if train_corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if dev_corpus.is_empty() {
        return Err(Error::Data("validation corpus is empty".into()));
    }
    if config.model.num_classes != train_corpus.num_classes
        || config.model.num_classes != dev_corpus.num_classes
    {
        return Err(Error::Config(format!(
            "model has {} classes, corpora have {}/{}",
            config.model.num_classes, train_corpus.num_classes, dev_corpus.num_classes
        )));
    }

    let hyper = config.resolved_hyperparams();
    let explain_cfg = config.explain_config();

    let effective = prepare_train_corpus(config, train_corpus)?;
    let vocab = Vocabulary::build(&effective, config.min_frequency)?;
    let mut model_config = config.model.clone();
    model_config.vocab_size = vocab.size();
    model_config.seed = config.seed;
    let mut model = Model::build(model_config)?;

    let train_docs = encode_corpus(&effective, &vocab, config.max_len);
    let dev_docs = encode_corpus(dev_corpus, &vocab, config.max_len);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = AdamState::new(model.params().iter().map(|p| &p.tensor), config.learning_rate);

    let mut metrics_writer = match &config.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..train_docs.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut epoch_forwards = 0;
        let mut n_steps = 0;

        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedDoc> = chunk.iter().map(|&i| &train_docs[i]).collect();
            let (record, grads) = {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let loss =
                    total_loss(&mut tape, &bound, &batch, &hyper, &explain_cfg, Some(&mut rng))?;
                if !loss.total_value.is_finite() {
                    return Err(Error::Diverged { epoch, step });
                }
                let gradients = tape.backward(loss.total)?;
                let grads: Vec<Tensor> = bound
                    .param_ids()
                    .iter()
                    .map(|&id| gradients.get(id).expect("registered parameter").clone())
                    .collect();
                (
                    StepRecord {
                        epoch,
                        step,
                        supervised: loss.supervised_value,
                        rationale: loss.rationale_value,
                        sparse: loss.sparse_value,
                        total: loss.total_value,
                        omission_forwards: loss.omission_forwards,
                    },
                    grads,
                )
            };
            adam.step(model.param_tensors_mut().zip(grads.iter()))?;

            sums.0 += record.supervised;
            sums.1 += record.rationale;
            sums.2 += record.sparse;
            sums.3 += record.total;
            epoch_forwards += record.omission_forwards;
            n_steps += 1;
            steps.push(record);
        }

        let dev_accuracy = validate(&model, &dev_docs)?;
        let n = n_steps as f64;
        let entry = EpochMetrics {
            epoch,
            mean_supervised: sums.0 / n,
            mean_rationale: sums.1 / n,
            mean_sparse: sums.2 / n,
            mean_total: sums.3 / n,
            dev_accuracy,
            seconds: started.elapsed().as_secs_f64(),
            omission_forwards: epoch_forwards,
        };
        log::info!(
            "epoch {}: total {:.4}, dev accuracy {:.3}, {:.1}s",
            epoch,
            entry.mean_total,
            dev_accuracy,
            entry.seconds
        );
        if let Some(w) = metrics_writer.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
        }
        metrics.push(entry);

        if best.as_ref().map_or(true, |(_, acc, _)| dev_accuracy > *acc) {
            best = Some((epoch, dev_accuracy, model.clone()));
        }
        if config.save_epoch_checkpoints {
            if let Some(dir) = &config.out_dir {
                save_checkpoint(&model, &vocab, config.max_len, &dir.join(format!("epoch-{}.ckpt", epoch)))?;
            }
        }
    }

    let (best_epoch, best_dev_accuracy, best_model) = best.expect("at least one epoch ran");
    if let Some(dir) = &config.out_dir {
        save_checkpoint(&best_model, &vocab, config.max_len, &dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome {
        model: best_model,
        vocab,
        metrics,
        steps,
        best_epoch,
        best_dev_accuracy,
        effective_train_size: train_docs.len(),
    })
}

/// Fraction of argmax-correct predictions; argmax ties break toward the
/// lowest class index.
pub fn validate(model: &Model, docs: &[EncodedDoc]) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Contract("cannot validate on an empty corpus".into()));
    }
    let mut correct = 0;
    for enc in docs {
        if argmax(&model.predict(enc)?) == enc.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / docs.len() as f64)
}

/// Index of the largest entry, first occurrence on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    }

    #[test]
    fn vanilla_mode_forces_zero_weights() {
        let config = TrainConfig::new(ModelConfig::toy(crate::models::Arch::Conv), TrainMode::Vanilla);
        let hp = config.resolved_hyperparams();
        assert_eq!(hp.lambda1, 0.0);
        assert_eq!(hp.lambda2, 0.0);
    }

    #[test]
    fn crex_mode_uses_arch_defaults() {
        let config = TrainConfig::new(ModelConfig::toy(crate::models::Arch::Conv), TrainMode::Crex);
        let hp = config.resolved_hyperparams();
        assert_eq!(hp.lambda1, 5e-2);
        assert_eq!(hp.alpha, 0.2);
        assert_eq!(hp.beta, 1.0);
        assert_eq!(hp.lambda2, 1e-5);
    }
}
