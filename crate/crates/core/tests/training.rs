//! End-to-end checks of the training loop: determinism, the vanilla
//! reduction, best-on-validation selection, and cost accounting.

use crex_core::data::{generate_synthetic, SynthCorpora, SyntheticSpec};
use crex_core::explain::{explanation_forward_count, Granularity};
use crex_core::models::{Arch, ModelConfig};
use crex_core::train::{train, TrainConfig, TrainMode};
use crex_core::Error;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        signal_vocab: 4,
        bias_vocab: 2,
        filler_vocab: 12,
        sequence_length: 8,
        num_classes: 2,
        bias_correlation: 1.0,
        shifted_correlation: 0.0,
        rationale_fraction: 0.5,
        train_count: 48,
        dev_count: 16,
        test_count: 16,
        shifted_count: 16,
        seed,
    }
}

fn small_model() -> ModelConfig {
    let mut config = ModelConfig::toy(Arch::Conv);
    config.embed_dim = 8;
    config.conv_widths = vec![2, 3];
    config.conv_channels = 4;
    config
}

fn small_config(mode: TrainMode, seed: u64) -> TrainConfig {
    let mut config = TrainConfig::new(small_model(), mode);
    config.epochs = 3;
    config.batch_size = 8;
    config.seed = seed;
    config.max_len = 8;
    config.learning_rate = 1e-2;
    config
}

fn corpora(seed: u64) -> SynthCorpora {
    generate_synthetic(&small_spec(seed)).unwrap()
}

#[test]
fn training_is_deterministic() {
    let data = corpora(3);
    let config = small_config(TrainMode::Crex, 7);
    let a = train(&config, &data.train, &data.dev).unwrap();
    let b = train(&config, &data.train, &data.dev).unwrap();

    assert_eq!(a.best_epoch, b.best_epoch);
    for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(ma.mean_total.to_bits(), mb.mean_total.to_bits());
        assert_eq!(ma.dev_accuracy, mb.dev_accuracy);
    }
    for (pa, pb) in a.model.params().iter().zip(b.model.params()) {
        assert!(pa
            .tensor
            .values()
            .iter()
            .zip(pb.tensor.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn crex_with_zero_weights_reproduces_vanilla() {
    let data = corpora(5);
    let vanilla = train(&small_config(TrainMode::Vanilla, 11), &data.train, &data.dev).unwrap();
    let mut zeroed = small_config(TrainMode::Crex, 11);
    zeroed.lambda1 = Some(0.0);
    zeroed.lambda2 = Some(0.0);
    let crex = train(&zeroed, &data.train, &data.dev).unwrap();

    assert_eq!(vanilla.steps.len(), crex.steps.len());
    for (a, b) in vanilla.steps.iter().zip(&crex.steps) {
        assert_eq!(a.total.to_bits(), b.total.to_bits(), "step {}/{}", a.epoch, a.step);
    }
    for (pa, pb) in vanilla.model.params().iter().zip(crex.model.params()) {
        assert!(pa
            .tensor
            .values()
            .iter()
            .zip(pb.tensor.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn best_checkpoint_maximizes_dev_accuracy_earliest() {
    let data = corpora(9);
    let outcome = train(&small_config(TrainMode::Vanilla, 2), &data.train, &data.dev).unwrap();

    assert_eq!(outcome.metrics.len(), 3);
    let best = outcome
        .metrics
        .iter()
        .map(|m| m.dev_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(outcome.best_dev_accuracy, best);
    let first_best = outcome
        .metrics
        .iter()
        .position(|m| m.dev_accuracy == best)
        .unwrap();
    assert_eq!(outcome.best_epoch, first_best);
}

#[test]
fn rationale_augment_grows_train_size_by_annotated_count() {
    let data = corpora(13);
    let annotated = data.train.rationale_count();
    assert!(annotated > 0);
    let outcome =
        train(&small_config(TrainMode::RationaleAugment, 4), &data.train, &data.dev).unwrap();
    assert_eq!(outcome.effective_train_size, data.train.len() + annotated);
}

#[test]
fn omission_cost_accounting_is_exact() {
    let data = corpora(17);
    let config = small_config(TrainMode::Crex, 6);
    let outcome = train(&config, &data.train, &data.dev).unwrap();

    // Every document appears exactly once per epoch, so the epoch total is
    // shuffle-invariant: two explanations per rationale instance (original
    // and negative input), one per sparse instance.
    let m = config.phrase_m;
    let per_doc: usize = data
        .train
        .documents
        .iter()
        .map(|d| {
            let units = d.tokens.len().min(config.max_len);
            let base = explanation_forward_count(units, m, Granularity::Word);
            if d.rationale.is_some() {
                2 * base
            } else {
                base
            }
        })
        .sum();
    for epoch in &outcome.metrics {
        assert_eq!(epoch.omission_forwards, per_doc, "epoch {}", epoch.epoch);
    }

    let vanilla = train(&small_config(TrainMode::Vanilla, 6), &data.train, &data.dev).unwrap();
    for epoch in &vanilla.metrics {
        assert_eq!(epoch.omission_forwards, 0);
    }
}

#[test]
fn divergent_loss_aborts_with_location() {
    let data = corpora(19);
    let mut config = small_config(TrainMode::Vanilla, 1);
    config.learning_rate = 1e160;
    match train(&config, &data.train, &data.dev) {
        Err(Error::Diverged { epoch, step }) => {
            assert_eq!(epoch, 0);
            assert!(step > 0, "first step starts from finite parameters");
        }
        other => panic!("expected divergence abort, got {:?}", other.map(|o| o.best_epoch)),
    }
}

#[test]
fn rationale_fraction_subsets_annotations() {
    let data = corpora(23);
    let mut config = small_config(TrainMode::Crex, 3);
    config.rationale_fraction = Some(0.0);
    let outcome = train(&config, &data.train, &data.dev).unwrap();
    // With no rationales left, only the sparse term can fire.
    for step in &outcome.steps {
        assert_eq!(step.rationale, 0.0);
        assert!(step.sparse >= 0.0);
    }
}
