//! The training objective: supervised cross-entropy plus the explanation
//! regularizers.
//!
//! For an instance with a rationale, the *confident* term shrinks
//! explanation scores outside the rationale, and the *uncertain* term acts
//! on the negative input (rationale positions suppressed at the embedding
//! level): it widens the probability gap between original and negative
//! input and pushes the negative input's attribution toward uniform. For
//! instances without rationales, a *sparse* term penalizes the L1 mass of
//! the whole score matrix. The joint objective is
//!
//! ```text
//! L = L_supervised + lambda1 * L_rationale + lambda2 * L_sparse
//! ```
//!
//! with the rationale term averaged over the rationale-bearing instances
//! of the batch and the sparse term over the rest.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedDoc;
use crate::explain::{
    omission_explain, rationale_at_granularity, ExplainConfig,
};
use crate::models::{Arch, BoundModel, SeqInput, SequenceClassifier};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::{Error, Result};

/// Smoothing added before attribution normalization so the distribution
/// stays defined on all-zero score columns.
pub const ATTRIBUTION_EPSILON: f64 = 1e-8;

/// Objective weights. `alpha` balances the probability gap against the
/// uniformity term inside the uncertain loss; `beta` balances confident
/// against uncertain; `lambda1`/`lambda2` weight the rationale and sparse
/// terms in the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl HyperParams {
    /// Per-architecture defaults that worked best on movie-review-scale
    /// corpora; beta and lambda2 stay fixed at 1 and 1e-5.
    pub fn defaults_for(arch: Arch) -> Self {
        let (lambda1, alpha) = match arch {
            Arch::Conv => (5e-2, 0.2),
            Arch::Recurrent => (1e-3, 0.5),
            Arch::SelfAttention => (2e-4, 0.3),
        };
        HyperParams { alpha, beta: 1.0, lambda1, lambda2: 1e-5 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{} must be finite and non-negative", name)));
            }
        }
        Ok(())
    }
}

/// Confident explanation loss: mean over classes of the L1 mass of scores
/// at non-rationale units. Zero exactly when the mask covers every unit.
pub fn confident_loss(tape: &mut Tape, scores: NodeId, rationale: &[u8]) -> Result<NodeId> {
    let t = tape.value(scores);
    let (units, classes) = (t.rows(), t.cols());
    if rationale.len() != units {
        return Err(Error::Contract(format!(
            "rationale has {} units, scores have {}: granularity mismatch",
            rationale.len(),
            units
        )));
    }
    let mut inverse = Vec::with_capacity(units * classes);
    for &r in rationale {
        inverse.extend(std::iter::repeat(1.0 - f64::from(r)).take(classes));
    }
    let mask = tape.constant(Tensor::new(vec![units, classes], inverse).unwrap());
    let masked = tape.mul(scores, mask);
    let norm = tape.l1(masked);
    Ok(tape.mul_const(norm, 1.0 / classes as f64))
}

/// The negative input: the token sequence with rationale-marked positions
/// suppressed by zeroing their embedding vectors. The sequence length is
/// unchanged.
pub fn negative_input(enc: &EncodedDoc) -> Result<SeqInput> {
    let rationale = enc
        .rationale
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("document {} has no rationale", enc.id)))?;
    Ok(SeqInput {
        indices: enc.real_indices().to_vec(),
        keep: Some(rationale.iter().map(|&r| 1.0 - f64::from(r)).collect()),
    })
}

/// Normalizes a score column into an attribution distribution:
/// `e = (|s| + eps) / sum(|s| + eps)`. All-zero columns become uniform.
pub fn normalize_attribution(tape: &mut Tape, column: NodeId) -> NodeId {
    let magnitudes = tape.abs(column);
    let shifted = tape.add_const(magnitudes, ATTRIBUTION_EPSILON);
    let total = tape.sum(shifted);
    tape.div_scalar(shifted, total)
}

/// Uncertain explanation loss for a negative input:
/// `-|f_y(x) - f_y(x')| - alpha * cos(e, uniform)`. Minimizing it widens
/// the probability gap and flattens the negative input's attribution.
pub fn uncertain_loss(
    tape: &mut Tape,
    full_probs: NodeId,
    negative_probs: NodeId,
    attribution: NodeId,
    label: usize,
    alpha: f64,
) -> NodeId {
    let p_full = tape.pick(full_probs, label);
    let p_neg = tape.pick(negative_probs, label);
    let diff = tape.sub(p_full, p_neg);
    let gap = tape.abs(diff);

    let units = tape.value(attribution).len();
    let uniform = tape.constant(Tensor::vector(vec![1.0 / units as f64; units]));
    let cos = tape.cosine(attribution, uniform);

    let neg_gap = tape.neg(gap);
    let weighted = tape.mul_const(cos, alpha);
    tape.sub(neg_gap, weighted)
}

/// Mean of `-ln f_y(x)` over the batch, with the guarded logarithm.
pub fn supervised_loss(tape: &mut Tape, probs: &[NodeId], labels: &[usize]) -> Result<NodeId> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "supervised_loss wants matching nonempty probs/labels, got {}/{}",
            probs.len(),
            labels.len()
        )));
    }
    let mut terms = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let py = tape.pick(p, y);
        let log = tape.log_guard(py);
        terms.push(tape.neg(log));
    }
    Ok(mean_of(tape, &terms))
}

/// Output of the rationale or sparse builders: the loss node (absent when
/// the instance subset is empty, contributing nothing) and the explanation
/// cost incurred.
pub struct RegularizerTerm {
    pub node: Option<NodeId>,
    pub omission_forwards: usize,
    pub emptied_windows: usize,
}

/// Rationale loss over the rationale-bearing instances: the mean of
/// `g_conf(x) + beta * g_unc(x')`. With `beta == 0` the negative-input
/// explanation is skipped entirely.
pub fn rationale_loss(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    docs: &[&EncodedDoc],
    hyper: &HyperParams,
    explain_cfg: &ExplainConfig,
) -> Result<RegularizerTerm> {
    let mut terms = Vec::with_capacity(docs.len());
    let mut forwards = 0;
    let mut emptied = 0;
    for enc in docs {
        let rationale_units = rationale_at_granularity(enc, explain_cfg.granularity)
            .ok_or_else(|| Error::Contract(format!("document {} has no rationale", enc.id)))?;

        let expl = omission_explain(
            tape,
            model,
            &SeqInput::from_encoded(enc),
            &enc.sentences,
            explain_cfg,
        )?;
        forwards += expl.window_forwards;
        emptied += expl.emptied_windows;
        let conf = confident_loss(tape, expl.scores, &rationale_units)?;

        let term = if hyper.beta > 0.0 {
            let neg = negative_input(enc)?;
            let neg_expl =
                omission_explain(tape, model, &neg, &enc.sentences, explain_cfg)?;
            forwards += neg_expl.window_forwards;
            emptied += neg_expl.emptied_windows;
            let column = tape.col(neg_expl.scores, enc.label);
            let attribution = normalize_attribution(tape, column);
            let unc = uncertain_loss(
                tape,
                expl.reference,
                neg_expl.reference,
                attribution,
                enc.label,
                hyper.alpha,
            );
            let scaled = tape.mul_const(unc, hyper.beta);
            tape.add(conf, scaled)
        } else {
            conf
        };
        terms.push(term);
    }
    let node = if terms.is_empty() { None } else { Some(mean_of(tape, &terms)) };
    Ok(RegularizerTerm { node, omission_forwards: forwards, emptied_windows: emptied })
}

/// Sparse explanation loss over the rationale-free instances:
/// the summed L1 mass of each score matrix, scaled by
/// `1 / (instances * classes)`.
pub fn sparse_loss(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    docs: &[&EncodedDoc],
    explain_cfg: &ExplainConfig,
) -> Result<RegularizerTerm> {
    let mut terms = Vec::with_capacity(docs.len());
    let mut forwards = 0;
    let mut emptied = 0;
    for enc in docs {
        let expl = omission_explain(
            tape,
            model,
            &SeqInput::from_encoded(enc),
            &enc.sentences,
            explain_cfg,
        )?;
        forwards += expl.window_forwards;
        emptied += expl.emptied_windows;
        terms.push(tape.l1(expl.scores));
    }
    let node = if terms.is_empty() {
        None
    } else {
        let classes = model.num_classes();
        let total = sum_of(tape, &terms);
        Some(tape.mul_const(total, 1.0 / (terms.len() * classes) as f64))
    };
    Ok(RegularizerTerm { node, omission_forwards: forwards, emptied_windows: emptied })
}

/// The assembled joint objective for one minibatch, with component values
/// and explanation cost for logging.
pub struct BatchLoss {
    pub total: NodeId,
    pub supervised_value: f64,
    pub rationale_value: f64,
    pub sparse_value: f64,
    pub total_value: f64,
    pub omission_forwards: usize,
    pub emptied_windows: usize,
}

/// Builds the joint objective on the tape. Cross-entropy forwards run
/// first in batch order (with dropout when `dropout_rng` is given);
/// regularizer terms are built only when their weight is positive and
/// their instance subset is nonempty, so a zero-weight run records exactly
/// the vanilla graph.
pub fn total_loss(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    batch: &[&EncodedDoc],
    hyper: &HyperParams,
    explain_cfg: &ExplainConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    hyper.validate()?;

    let mut probs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for enc in batch {
        let input = SeqInput::from_encoded(enc);
        probs.push(model.forward_with(tape, &input, dropout_rng.as_deref_mut())?);
        labels.push(enc.label);
    }
    let supervised = supervised_loss(tape, &probs, &labels)?;

    let with_rationale: Vec<&EncodedDoc> =
        batch.iter().copied().filter(|d| d.rationale.is_some()).collect();
    let without_rationale: Vec<&EncodedDoc> =
        batch.iter().copied().filter(|d| d.rationale.is_none()).collect();

    let mut total = supervised;
    let mut forwards = 0;
    let mut emptied = 0;
    let mut rationale_value = 0.0;
    let mut sparse_value = 0.0;

    if hyper.lambda1 > 0.0 && !with_rationale.is_empty() {
        let term = rationale_loss(tape, model, &with_rationale, hyper, explain_cfg)?;
        forwards += term.omission_forwards;
        emptied += term.emptied_windows;
        if let Some(node) = term.node {
            rationale_value = tape.value(node).item();
            let weighted = tape.mul_const(node, hyper.lambda1);
            total = tape.add(total, weighted);
        }
    }
    if hyper.lambda2 > 0.0 && !without_rationale.is_empty() {
        let term = sparse_loss(tape, model, &without_rationale, explain_cfg)?;
        forwards += term.omission_forwards;
        emptied += term.emptied_windows;
        if let Some(node) = term.node {
            sparse_value = tape.value(node).item();
            let weighted = tape.mul_const(node, hyper.lambda2);
            total = tape.add(total, weighted);
        }
    }

    Ok(BatchLoss {
        total,
        supervised_value: tape.value(supervised).item(),
        rationale_value,
        sparse_value,
        total_value: tape.value(total).item(),
        omission_forwards: forwards,
        emptied_windows: emptied,
    })
}

fn sum_of(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n);
    }
    acc
}

fn mean_of(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    if nodes.len() == 1 {
        return nodes[0];
    }
    let total = sum_of(tape, nodes);
    tape.mul_const(total, 1.0 / nodes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Span;

    fn scores_on(tape: &mut Tape, rows: usize, cols: usize, values: Vec<f64>) -> NodeId {
        tape.constant(Tensor::new(vec![rows, cols], values).unwrap())
    }

    #[test]
    fn confident_loss_direct_evaluation() {
        // U=3, C=2, r=[1,0,0], both columns [0.5, 0.2, -0.3]:
        // (1/2) * ((0.2 + 0.3) + (0.2 + 0.3)) = 0.5
        let mut tape = Tape::new();
        let s = scores_on(&mut tape, 3, 2, vec![0.5, 0.5, 0.2, 0.2, -0.3, -0.3]);
        let loss = confident_loss(&mut tape, s, &[1, 0, 0]).unwrap();
        assert!((tape.value(loss).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn confident_loss_full_mask_is_zero() {
        let mut tape = Tape::new();
        let s = scores_on(&mut tape, 2, 2, vec![0.9, -0.9, 0.4, -0.4]);
        let loss = confident_loss(&mut tape, s, &[1, 1]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn confident_loss_zero_scores_zero() {
        let mut tape = Tape::new();
        let s = scores_on(&mut tape, 2, 2, vec![0.0; 4]);
        let loss = confident_loss(&mut tape, s, &[0, 0]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn confident_loss_granularity_mismatch_rejected() {
        let mut tape = Tape::new();
        let s = scores_on(&mut tape, 3, 2, vec![0.0; 6]);
        assert!(confident_loss(&mut tape, s, &[1, 0]).is_err());
    }

    fn enc(rationale: Option<Vec<u8>>) -> EncodedDoc {
        let length = rationale.as_ref().map(|r| r.len()).unwrap_or(3);
        EncodedDoc {
            id: "d".into(),
            indices: (2..2 + length as u32).collect(),
            length,
            label: 1,
            rationale,
            sentences: vec![Span::new(0, length)],
        }
    }

    #[test]
    fn negative_input_masks_marked_positions() {
        let input = negative_input(&enc(Some(vec![1, 0]))).unwrap();
        assert_eq!(input.keep, Some(vec![0.0, 1.0]));
        assert_eq!(input.indices.len(), 2);

        let all = negative_input(&enc(Some(vec![1, 1, 1]))).unwrap();
        assert_eq!(all.keep, Some(vec![0.0, 0.0, 0.0]));
        let none = negative_input(&enc(Some(vec![0, 0]))).unwrap();
        assert_eq!(none.keep, Some(vec![1.0, 1.0]));
    }

    #[test]
    fn normalize_attribution_direct() {
        let mut tape = Tape::new();
        let col = tape.constant(Tensor::vector(vec![1.0, 3.0]));
        let e = normalize_attribution(&mut tape, col);
        let v = tape.value(e).values();
        assert!((v[0] - 0.25).abs() < 1e-8);
        assert!((v[1] - 0.75).abs() < 1e-8);
    }

    #[test]
    fn normalize_attribution_zero_column_is_uniform() {
        let mut tape = Tape::new();
        let col = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0, 0.0]));
        let e = normalize_attribution(&mut tape, col);
        for &v in tape.value(e).values() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_attribution_one_hot_stays_one_hot() {
        let mut tape = Tape::new();
        let col = tape.constant(Tensor::vector(vec![0.0, 2.0, 0.0]));
        let e = normalize_attribution(&mut tape, col);
        let v = tape.value(e).values();
        assert!(v[1] > 0.999_999);
        assert!(v[0] < 1e-7 && v[2] < 1e-7);
    }

    #[test]
    fn uncertain_loss_symmetric_case() {
        // Equal probabilities and a uniform attribution: cosine is 1 and
        // the gap is 0, so the loss is exactly -alpha.
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let e = tape.constant(Tensor::vector(vec![0.25; 4]));
        let loss = uncertain_loss(&mut tape, p, p, e, 1, 0.7);
        assert!((tape.value(loss).item() + 0.7).abs() < 1e-12);
    }

    #[test]
    fn uncertain_loss_one_hot_cosine() {
        // cos(one-hot, uniform) over U=4 is 1/sqrt(4) = 0.5.
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let e = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]));
        let loss = uncertain_loss(&mut tape, p, p, e, 0, 1.0);
        assert!((tape.value(loss).item() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn uncertain_loss_alpha_zero_is_gap_only() {
        let mut tape = Tape::new();
        let p1 = tape.constant(Tensor::vector(vec![0.9, 0.1]));
        let p2 = tape.constant(Tensor::vector(vec![0.3, 0.7]));
        let e = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let loss = uncertain_loss(&mut tape, p1, p2, e, 0, 0.0);
        assert!((tape.value(loss).item() + 0.6).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_values() {
        let mut tape = Tape::new();
        let certain = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let loss = supervised_loss(&mut tape, &[certain], &[1]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        let half = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let loss = supervised_loss(&mut tape, &[half], &[0]).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let tiny = tape.constant(Tensor::vector(vec![1e-15, 1.0 - 1e-15]));
        let loss = supervised_loss(&mut tape, &[tiny], &[0]).unwrap();
        assert!(tape.value(loss).item().is_finite());
    }

    #[test]
    fn sparse_scaling_direct_evaluation() {
        // One instance, C=2, columns [0.2, -0.3] and [0.1, 0]:
        // (0.5 + 0.1) / 2 = 0.3. Row-major layout interleaves the columns.
        let mut tape = Tape::new();
        let s = scores_on(&mut tape, 2, 2, vec![0.2, 0.1, -0.3, 0.0]);
        let norm = tape.l1(s);
        let scaled = tape.mul_const(norm, 1.0 / 2.0);
        assert!((tape.value(scaled).item() - 0.3).abs() < 1e-12);
    }
}
