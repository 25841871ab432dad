//! The three classifier architectures over a trainable embedding table.
//!
//! All of them map a token-index sequence to class probabilities through
//! the differentiation tape:
//!
//! - `conv`: 1-D convolutions with several kernel widths, ReLU, max-pool
//!   over time per channel, concatenated.
//! - `recurrent`: a single gated recurrent cell (standard LSTM equations,
//!   see [`forward`]) with max pooling over all hidden states.
//! - `self_attention`: a bidirectional recurrent encoder with a row-wise
//!   soft attention producing a matrix embedding whose rows are
//!   concatenated.
//!
//! A fixed-size representation then passes through one fully connected
//! layer (with optional dropout) and a softmax.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedDoc;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Conv,
    Recurrent,
    SelfAttention,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::Conv => write!(f, "conv"),
            Arch::Recurrent => write!(f, "recurrent"),
            Arch::SelfAttention => write!(f, "self_attention"),
        }
    }
}

fn default_embed_dim() -> usize {
    32
}
fn default_conv_widths() -> Vec<usize> {
    vec![2, 3, 4]
}
fn default_conv_channels() -> usize {
    8
}
fn default_hidden_dim() -> usize {
    32
}
fn default_attention_rows() -> usize {
    10
}
fn default_num_classes() -> usize {
    2
}

/// Architecture and dimension settings. Defaults are desk-scale; full-size
/// runs (embedding 300, recurrent hidden 150, attention hidden 300 per
/// direction with 10 rows) are reachable by overriding the fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_conv_widths")]
    pub conv_widths: Vec<usize>,
    #[serde(default = "default_conv_channels")]
    pub conv_channels: usize,
    /// Recurrent hidden size; for `self_attention` this is the per-direction
    /// hidden size and also the attention MLP width.
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_attention_rows")]
    pub attention_rows: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// 0 means "fill in from the vocabulary built off the training data".
    #[serde(default)]
    pub vocab_size: usize,
    /// Dropout rate on the fully connected layer input; active only in
    /// training-mode forwards.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(arch: Arch) -> Self {
        ModelConfig {
            arch,
            embed_dim: default_embed_dim(),
            conv_widths: default_conv_widths(),
            conv_channels: default_conv_channels(),
            hidden_dim: default_hidden_dim(),
            attention_rows: default_attention_rows(),
            num_classes: default_num_classes(),
            vocab_size: 0,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// Width of the representation fed to the classifier head.
    pub fn representation_dim(&self) -> usize {
        match self.arch {
            Arch::Conv => self.conv_widths.len() * self.conv_channels,
            Arch::Recurrent => self.hidden_dim,
            Arch::SelfAttention => self.attention_rows * 2 * self.hidden_dim,
        }
    }

    pub fn max_conv_width(&self) -> usize {
        self.conv_widths.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size {} too small (needs the two reserved indices)",
                self.vocab_size
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config("all model dimensions must be at least 1, classes at least 2".into()));
        }
        if self.arch == Arch::Conv {
            if self.conv_widths.is_empty() || self.conv_channels == 0 {
                return Err(Error::Config("conv arch needs kernel widths and channels".into()));
            }
            if self.conv_widths.iter().any(|&w| w == 0) {
                return Err(Error::Config("kernel widths must be positive".into()));
            }
        }
        if self.arch == Arch::SelfAttention && self.attention_rows == 0 {
            return Err(Error::Config("attention needs at least one row".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// A classifier: named parameters plus the config they were built from.
/// A model is immutable during forward passes; only the optimizer mutates
/// parameter values, under exclusive access.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Param>,
}

impl Model {
    /// Builds a model with seeded initialization: embedding entries from
    /// uniform(-0.05, 0.05), weight matrices from fan-in-scaled uniform,
    /// biases zero. The same config and seed give bit-identical parameters.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();

        let mut embed_values = Vec::with_capacity(config.vocab_size * config.embed_dim);
        for _ in 0..config.vocab_size * config.embed_dim {
            embed_values.push(rng.gen_range(-0.05..0.05));
        }
        params.push(Param {
            name: "embed".into(),
            tensor: Tensor::matrix(config.vocab_size, config.embed_dim, embed_values)?,
        });

        let mut weight = |rng: &mut ChaCha8Rng, name: String, rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let values: Vec<f64> =
                (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Param { name, tensor: Tensor::matrix(rows, cols, values).unwrap() }
        };
        let zero_bias = |name: String, n: usize| Param {
            name,
            tensor: Tensor::vector(vec![0.0; n]),
        };

        let (e, h, c) = (config.embed_dim, config.hidden_dim, config.num_classes);
        match config.arch {
            Arch::Conv => {
                for &w in &config.conv_widths {
                    params.push(weight(
                        &mut rng,
                        format!("conv{}.kernel", w),
                        config.conv_channels,
                        w * e,
                    ));
                    params.push(zero_bias(format!("conv{}.bias", w), config.conv_channels));
                }
            }
            Arch::Recurrent => {
                push_cell_params(&mut params, &mut rng, "lstm", e, h, &mut weight, &zero_bias);
            }
            Arch::SelfAttention => {
                push_cell_params(&mut params, &mut rng, "fw", e, h, &mut weight, &zero_bias);
                push_cell_params(&mut params, &mut rng, "bw", e, h, &mut weight, &zero_bias);
                params.push(weight(&mut rng, "attn.w1".into(), h, 2 * h));
                params.push(weight(&mut rng, "attn.w2".into(), config.attention_rows, h));
            }
        }
        let rep = config.representation_dim();
        params.push(weight(&mut rng, "head.weight".into(), c, rep));
        params.push(zero_bias("head.bias".into(), c));

        Ok(Model { config, params })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    /// Total scalar parameter count.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Overwrites all parameter values from a flat slice (the layout used
    /// by finite-difference checks).
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} values, model wants {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// All parameter values as one flat vector, in parameter order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for p in &self.params {
            out.extend_from_slice(p.tensor.values());
        }
        out
    }

    /// Registers every parameter on the tape, in declaration order.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundModel<'m> {
        let ids = self.params.iter().map(|p| tape.param(p.tensor.clone())).collect();
        BoundModel { model: self, ids }
    }

    /// Evaluation-mode class probabilities for one encoded document.
    pub fn predict(&self, enc: &EncodedDoc) -> Result<Vec<f64>> {
        self.predict_input(&SeqInput::from_encoded(enc))
    }

    /// Evaluation-mode class probabilities for a raw index sequence.
    pub fn predict_input(&self, input: &SeqInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = bound.forward(&mut tape, input)?;
        Ok(tape.value(out).values().to_vec())
    }
}

fn push_cell_params(
    params: &mut Vec<Param>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    e: usize,
    h: usize,
    weight: &mut impl FnMut(&mut ChaCha8Rng, String, usize, usize) -> Param,
    zero_bias: &impl Fn(String, usize) -> Param,
) {
    for gate in ["input", "forget", "cell", "output"] {
        params.push(weight(rng, format!("{}.w_{}", prefix, gate), h, e));
        params.push(weight(rng, format!("{}.u_{}", prefix, gate), h, h));
        params.push(zero_bias(format!("{}.b_{}", prefix, gate), h));
    }
}

/// A token sequence as the model consumes it: real (non-padding) indices
/// plus an optional per-position scale applied to the embedding rows.
/// The scale is how negative inputs suppress rationale-marked positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqInput {
    pub indices: Vec<u32>,
    pub keep: Option<Vec<f64>>,
}

impl SeqInput {
    pub fn new(indices: Vec<u32>) -> Self {
        SeqInput { indices, keep: None }
    }

    pub fn from_encoded(enc: &EncodedDoc) -> Self {
        SeqInput { indices: enc.real_indices().to_vec(), keep: None }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// A copy with only the listed positions kept, in order. The keep mask
    /// stays aligned.
    pub fn gather(&self, positions: &[usize]) -> SeqInput {
        SeqInput {
            indices: positions.iter().map(|&p| self.indices[p]).collect(),
            keep: self
                .keep
                .as_ref()
                .map(|k| positions.iter().map(|&p| k[p]).collect()),
        }
    }
}

/// Anything that maps a token sequence to class probabilities on a tape.
/// Implementations must be dropout-free so explanation scores compare the
/// same deterministic function with and without each window.
pub trait SequenceClassifier {
    fn num_classes(&self) -> usize;
    fn forward(&self, tape: &mut Tape, input: &SeqInput) -> Result<NodeId>;
}

/// A model whose parameters are registered on a tape. Many forwards may be
/// recorded against one binding; gradients accumulate across all of them.
pub struct BoundModel<'m> {
    model: &'m Model,
    ids: Vec<NodeId>,
}

impl<'m> BoundModel<'m> {
    pub fn model(&self) -> &Model {
        self.model
    }

    /// Node ids of the bound parameters, aligned with `Model::params`.
    pub fn param_ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub(crate) fn id(&self, name: &str) -> NodeId {
        let pos = self
            .model
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        self.ids[pos]
    }
}

impl SequenceClassifier for BoundModel<'_> {
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn forward(&self, tape: &mut Tape, input: &SeqInput) -> Result<NodeId> {
        self.forward_with(tape, input, None)
    }
}
