//! Omission-based local explanations as differentiable tape values.
//!
//! The contribution of unit `t` (a token or a sentence) to class `c` is the
//! average drop in `f_c` when a deletion window covering `t` is removed
//! from the input. Deletion truly shortens the sequence: the kept positions
//! are gathered into a new, shorter input rather than zero-masked. Each
//! distinct window costs exactly one forward pass, shared by every unit it
//! covers and every class.
//!
//! At word granularity the windows are the length-`m` phrases containing
//! `t`, clipped to the sequence; near the boundaries fewer windows exist
//! and the average runs over the clipped count. At sentence granularity
//! each sentence is one window. Deleting a window that would empty the
//! input falls back to a single padding token and is counted in
//! [`Explanation::emptied_windows`].
//!
//! Dropout is never active inside these forwards: the scores compare the
//! same deterministic function with and without each window.

use serde::{Deserialize, Serialize};

use crate::data::{EncodedDoc, Span, PAD_INDEX};
use crate::models::{SeqInput, SequenceClassifier};
use crate::tensor::{NodeId, Tape};
use crate::{Error, Result};

/// Unit of explanation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Word,
    Sentence,
}

/// Settings for [`omission_explain`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub granularity: Granularity,
    /// Deletion phrase length at word granularity; clamped to the input
    /// length, ignored for sentences.
    pub phrase_m: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { granularity: Granularity::Word, phrase_m: 3 }
    }
}

/// Per-unit, per-class contribution scores for one input, plus the
/// bookkeeping the trainer needs for exact cost accounting.
#[derive(Debug)]
pub struct Explanation {
    /// `[units, classes]` score matrix on the tape; rows follow `spans`.
    pub scores: NodeId,
    /// Token span each row explains.
    pub spans: Vec<Span>,
    /// `f(input)`: the full-input probability vector the deltas reference.
    pub reference: NodeId,
    /// Number of window-deleted forward passes performed.
    pub window_forwards: usize,
    /// Windows whose deletion emptied the input.
    pub emptied_windows: usize,
}

/// All length-`m` deletion windows containing unit `t`, clipped to
/// `[0, units)`. When `m >= units` the single window is the whole range.
pub fn deletion_windows(t: usize, m: usize, units: usize) -> Vec<Span> {
    assert!(t < units, "unit {} out of range {}", t, units);
    let m = m.max(1);
    if m >= units {
        return vec![Span::new(0, units)];
    }
    let first = t.saturating_sub(m - 1);
    let last = t.min(units - m);
    (first..=last).map(|s| Span::new(s, s + m)).collect()
}

/// Number of distinct extra forward passes an explanation costs:
/// `max(units - m + 1, 1)` at word granularity, one per unit (sentence)
/// otherwise.
pub fn explanation_forward_count(units: usize, m: usize, granularity: Granularity) -> usize {
    match granularity {
        Granularity::Word => units.saturating_sub(m.max(1)) + 1,
        Granularity::Sentence => units,
    }
}

/// Computes the omission explanation for `input`. `sentences` must
/// partition `[0, input.len())` when sentence granularity is requested
/// (pass the spans from the encoded document; a negative input keeps the
/// same positions). Scores stay differentiable through every forward.
pub fn omission_explain(
    tape: &mut Tape,
    model: &impl SequenceClassifier,
    input: &SeqInput,
    sentences: &[Span],
    config: &ExplainConfig,
) -> Result<Explanation> {
    if input.is_empty() {
        return Err(Error::EmptyInput);
    }
    let reference = model.forward(tape, input)?;

    let windows: Vec<Span> = match config.granularity {
        Granularity::Word => {
            let u = input.len();
            let m = config.phrase_m.max(1).min(u);
            (0..=u - m).map(|s| Span::new(s, s + m)).collect()
        }
        Granularity::Sentence => {
            validate_partition(sentences, input.len())?;
            sentences.to_vec()
        }
    };

    let mut emptied = 0;
    let mut window_probs = Vec::with_capacity(windows.len());
    for w in &windows {
        let kept: Vec<usize> = (0..input.len()).filter(|&p| !w.contains(p)).collect();
        let partial = if kept.is_empty() {
            emptied += 1;
            SeqInput {
                indices: vec![PAD_INDEX],
                keep: input.keep.as_ref().map(|_| vec![1.0]),
            }
        } else {
            input.gather(&kept)
        };
        window_probs.push(model.forward(tape, &partial)?);
    }

    let (rows, spans) = match config.granularity {
        Granularity::Word => {
            let u = input.len();
            let m = config.phrase_m.max(1).min(u);
            let mut rows = Vec::with_capacity(u);
            for t in 0..u {
                // Windows containing t are a contiguous run of starts.
                let (first, last) = if m == u {
                    (0, 0)
                } else {
                    (t.saturating_sub(m - 1), t.min(u - m))
                };
                let deltas: Vec<NodeId> = (first..=last)
                    .map(|s| tape.sub(reference, window_probs[s]))
                    .collect();
                rows.push(average(tape, &deltas));
            }
            let spans = (0..u).map(|t| Span::new(t, t + 1)).collect();
            (rows, spans)
        }
        Granularity::Sentence => {
            let rows = window_probs
                .iter()
                .map(|&p| tape.sub(reference, p))
                .collect();
            (rows, windows.clone())
        }
    };

    let scores = tape.stack_rows(&rows);
    Ok(Explanation {
        scores,
        spans,
        reference,
        window_forwards: windows.len(),
        emptied_windows: emptied,
    })
}

/// Explanation for an encoded document's real token prefix.
pub fn omission_explain_doc(
    tape: &mut Tape,
    model: &impl SequenceClassifier,
    enc: &EncodedDoc,
    config: &ExplainConfig,
) -> Result<Explanation> {
    omission_explain(tape, model, &SeqInput::from_encoded(enc), &enc.sentences, config)
}

/// The document's rationale mask at the requested granularity. A sentence
/// counts as rationale-marked when any of its tokens is marked.
pub fn rationale_at_granularity(enc: &EncodedDoc, granularity: Granularity) -> Option<Vec<u8>> {
    let rationale = enc.rationale.as_ref()?;
    match granularity {
        Granularity::Word => Some(rationale.clone()),
        Granularity::Sentence => Some(
            enc.sentences
                .iter()
                .map(|span| u8::from(rationale[span.start..span.end].iter().any(|&m| m == 1)))
                .collect(),
        ),
    }
}

fn average(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    assert!(!nodes.is_empty());
    if nodes.len() == 1 {
        // Bit-exact reduction: a single window needs no scaling.
        return nodes[0];
    }
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n);
    }
    tape.mul_const(acc, 1.0 / nodes.len() as f64)
}

fn validate_partition(spans: &[Span], len: usize) -> Result<()> {
    let mut expected = 0;
    for span in spans {
        if span.start != expected || span.is_empty() {
            return Err(Error::Contract(format!(
                "sentence spans must partition [0, {}), got {:?}",
                len, spans
            )));
        }
        expected = span.end;
    }
    if expected != len {
        return Err(Error::Contract(format!(
            "sentence spans cover [0, {}), input has length {}",
            expected, len
        )));
    }
    Ok(())
}
