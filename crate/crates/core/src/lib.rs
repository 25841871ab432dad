//! Training text classifiers whose local explanations are pushed to agree
//! with expert rationales, plus the measurement harness for the resulting
//! credibility and out-of-distribution generalization gains.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`tensor`]: dense arrays, a reverse-mode differentiation tape, and an
//!   adaptive-moment optimizer.
//! - [`data`]: corpus loading with token-aligned rationale masks, vocabulary
//!   and encoding, plus a synthetic spurious-correlation corpus generator.
//! - [`models`]: convolutional, recurrent, and self-attention classifiers
//!   over a trainable embedding table, with bit-exact checkpointing.
//! - [`explain`]: omission-based local explanations at word or sentence
//!   granularity, emitted as differentiable tape values.
//! - [`losses`]: the confident/uncertain/rationale/sparse explanation
//!   regularizers and the joint training objective.
//! - [`train`]: the epoch loop with best-on-validation model selection.
//! - [`eval`]: symmetric-KL credibility scoring, adversarial keyword
//!   filtering, and generalization reports.

pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub use data::{Corpus, Document, EncodedDoc, Split, SyntheticSpec, Vocabulary};
pub use eval::CredibilityReport;
pub use explain::{ExplainConfig, Explanation, Granularity};
pub use losses::HyperParams;
pub use models::{Arch, Model, ModelConfig, SeqInput, SequenceClassifier};
pub use tensor::{AdamState, Gradients, NodeId, Tape, Tensor};
pub use train::{EpochMetrics, TrainConfig, TrainMode, TrainOutcome};
