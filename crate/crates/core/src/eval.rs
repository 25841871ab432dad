//! Credibility scoring, the adversarial keyword filter, and the
//! generalization-gap report.
//!
//! Credibility measures how well a model's local explanation agrees with
//! the expert rationale: both are smoothed, L1-normalized, and compared by
//! symmetric KL divergence (natural log; lower is better). The explanation
//! column scored is the ground-truth label's, in absolute value; the
//! rationale mask normalizes to uniform-over-marked-units.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{encode_corpus, segment_tokens, Corpus, Document, Vocabulary};
use crate::explain::{omission_explain_doc, rationale_at_granularity, ExplainConfig, Granularity};
use crate::models::Model;
use crate::tensor::Tape;
use crate::train::validate;
use crate::{Error, Result};

/// Smoothing added to both vectors before normalization; rationale masks
/// contain exact zeros and raw KL would be infinite.
pub const SYM_KL_EPSILON: f64 = 1e-8;

/// Symmetric KL divergence between two non-negative vectors after
/// smoothing and L1 normalization. Zero iff the normalized inputs match;
/// invariant under positive scaling of either input.
pub fn sym_kl(p_raw: &[f64], q_raw: &[f64]) -> Result<f64> {
    if p_raw.len() != q_raw.len() || p_raw.is_empty() {
        return Err(Error::Contract(format!(
            "sym_kl wants equal nonempty lengths, got {} and {}",
            p_raw.len(),
            q_raw.len()
        )));
    }
    if p_raw.iter().chain(q_raw).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Contract("sym_kl inputs must be finite and non-negative".into()));
    }
    let p = smooth_normalize(p_raw);
    let q = smooth_normalize(q_raw);
    let kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x * (x / y).ln()).sum()
    };
    Ok(0.5 * (kl(&p, &q) + kl(&q, &p)))
}

fn smooth_normalize(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().map(|&v| v + SYM_KL_EPSILON).sum();
    raw.iter().map(|&v| (v + SYM_KL_EPSILON) / total).collect()
}

/// One scored instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub sym_kl: f64,
}

/// Credibility scores for a corpus, plus the accuracy on it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CredibilityReport {
    pub granularity: Granularity,
    pub phrase_m: usize,
    pub per_instance: Vec<InstanceScore>,
    pub mean_sym_kl: f64,
    pub scored: usize,
    /// Instances without a rationale, skipped.
    pub skipped: usize,
    pub accuracy: f64,
}

/// Scores every rationale-bearing document: the omission explanation's
/// ground-truth-label column (absolute values) against the rationale mask
/// at the same granularity. Documents without rationales are skipped and
/// counted; a corpus with none to score is an error.
pub fn credibility(
    model: &Model,
    corpus: &Corpus,
    vocab: &Vocabulary,
    max_len: usize,
    config: &ExplainConfig,
) -> Result<CredibilityReport> {
    let docs = encode_corpus(corpus, vocab, max_len);
    let mut per_instance = Vec::new();
    let mut skipped = 0;
    for enc in &docs {
        let rationale = match rationale_at_granularity(enc, config.granularity) {
            Some(r) => r,
            None => {
                skipped += 1;
                continue;
            }
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let expl = omission_explain_doc(&mut tape, &bound, enc, config)?;
        let scores = tape.value(expl.scores);
        let classes = scores.cols();
        let column: Vec<f64> = (0..scores.rows())
            .map(|u| scores.values()[u * classes + enc.label].abs())
            .collect();
        let mask: Vec<f64> = rationale.iter().map(|&m| f64::from(m)).collect();
        per_instance.push(InstanceScore { id: enc.id.clone(), sym_kl: sym_kl(&column, &mask)? });
    }
    if per_instance.is_empty() {
        return Err(Error::Data("nothing to score: no document carries a rationale".into()));
    }
    let mean_sym_kl =
        per_instance.iter().map(|s| s.sym_kl).sum::<f64>() / per_instance.len() as f64;
    Ok(CredibilityReport {
        granularity: config.granularity,
        phrase_m: config.phrase_m,
        scored: per_instance.len(),
        skipped,
        per_instance,
        mean_sym_kl,
        accuracy: validate(model, &docs)?,
    })
}

/// Deletes, within each document, every sentence containing any of the
/// keywords (case-insensitive whole-token match). Documents left empty are
/// dropped; the second return value counts them. Applying the filter twice
/// changes nothing: surviving sentences contain no keyword.
pub fn adversarial_filter(corpus: &Corpus, keywords: &[String]) -> Result<(Corpus, usize)> {
    let needles: Vec<String> = keywords.iter().map(|k| k.to_lowercase()).collect();
    let mut documents = Vec::with_capacity(corpus.len());
    let mut dropped = 0;
    for doc in &corpus.documents {
        let spans = segment_tokens(&doc.tokens);
        let mut tokens = Vec::new();
        let mut rationale = doc.rationale.as_ref().map(|_| Vec::new());
        for span in spans {
            let hit = doc.tokens[span.start..span.end]
                .iter()
                .any(|t| needles.contains(&t.to_lowercase()));
            if hit {
                continue;
            }
            tokens.extend_from_slice(&doc.tokens[span.start..span.end]);
            if let (Some(out), Some(r)) = (rationale.as_mut(), doc.rationale.as_ref()) {
                out.extend_from_slice(&r[span.start..span.end]);
            }
        }
        if tokens.is_empty() {
            dropped += 1;
            continue;
        }
        documents.push(Document { id: doc.id.clone(), tokens, label: doc.label, rationale });
    }
    Ok((Corpus::new(documents, corpus.num_classes, corpus.split)?, dropped))
}

/// Accuracy per split plus the in-distribution-to-shifted gap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub accuracy: BTreeMap<String, f64>,
    /// `test` accuracy minus `shifted` accuracy, when both splits exist.
    pub gap: Option<f64>,
}

/// Evaluates accuracy over each named split. All splits must share the
/// model's class count.
pub fn generalization_report(
    model: &Model,
    vocab: &Vocabulary,
    max_len: usize,
    splits: &[(String, &Corpus)],
) -> Result<GeneralizationReport> {
    let mut accuracy = BTreeMap::new();
    for (name, corpus) in splits {
        if corpus.num_classes != model.config.num_classes {
            return Err(Error::Contract(format!(
                "split {} has {} classes, model has {}",
                name, corpus.num_classes, model.config.num_classes
            )));
        }
        let docs = encode_corpus(corpus, vocab, max_len);
        accuracy.insert(name.clone(), validate(model, &docs)?);
    }
    let gap = match (accuracy.get("test"), accuracy.get("shifted")) {
        (Some(t), Some(s)) => Some(t - s),
        _ => None,
    };
    Ok(GeneralizationReport { accuracy, gap })
}
