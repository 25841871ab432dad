//! Corpus ingestion with token-aligned rationale masks, vocabulary
//! construction, encoding, sentence segmentation, and the
//! rationale-augmentation transform.
//!
//! Corpora are UTF-8 JSON-lines: one object per line with keys `id`,
//! `tokens`, `label`, and an optional `rationale` (a 0/1 mask aligned to
//! `tokens`). Extra keys are ignored. Documents are pre-tokenized so
//! rationale masks align exactly; raw text goes through [`tokenize_raw`],
//! which has no rationale support.

mod synthetic;

pub use synthetic::{
    corrupt_rationales, generate_synthetic, CorruptMode, SynthCorpora, SyntheticSpec,
};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reserved vocabulary index for padding.
pub const PAD_INDEX: u32 = 0;
/// Reserved vocabulary index for out-of-vocabulary tokens.
pub const UNK_INDEX: u32 = 1;

/// A half-open token-index span `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }
}

/// A tokenized text with its label and optional expert rationale mask
/// (1 marks a token the expert considers responsible for the label).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<Vec<u8>>,
}

impl Document {
    /// Validates internal consistency against a class count.
    fn validate(&self, num_classes: usize) -> std::result::Result<(), String> {
        if self.label >= num_classes {
            return Err(format!(
                "document {}: label {} out of range for {} classes",
                self.id, self.label, num_classes
            ));
        }
        if let Some(r) = &self.rationale {
            if r.len() != self.tokens.len() {
                return Err(format!(
                    "document {}: rationale length {} does not match {} tokens",
                    self.id,
                    r.len(),
                    self.tokens.len()
                ));
            }
            if let Some(bad) = r.iter().find(|&&v| v > 1) {
                return Err(format!(
                    "document {}: rationale entries must be 0 or 1, found {}",
                    self.id, bad
                ));
            }
        }
        Ok(())
    }
}

/// Which role a corpus plays in an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    Shifted,
}

/// A labeled document collection with a fixed class count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub num_classes: usize,
    pub split: Split,
}

impl Corpus {
    pub fn new(documents: Vec<Document>, num_classes: usize, split: Split) -> Result<Self> {
        let mut seen = HashSet::new();
        for doc in &documents {
            doc.validate(num_classes).map_err(Error::Data)?;
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::Data(format!("duplicate document id {}", doc.id)));
            }
        }
        Ok(Corpus { documents, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Number of documents carrying a rationale mask.
    pub fn rationale_count(&self) -> usize {
        self.documents.iter().filter(|d| d.rationale.is_some()).count()
    }

    /// Writes the corpus as JSON-lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        for doc in &self.documents {
            serde_json::to_writer(&mut file, doc)?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Loads a JSON-lines corpus. Malformed lines report their 1-based line
/// number; rationale/token mismatches report the document id.
pub fn load_corpus(path: &Path, num_classes: usize, split: Split) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("cannot open corpus {}: {}", path.display(), e))
    })?;
    let reader = BufReader::new(file);
    let mut documents = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::CorpusLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        doc.validate(num_classes).map_err(|m| Error::CorpusLine { line: i + 1, message: m })?;
        documents.push(doc);
    }
    Corpus::new(documents, num_classes, split)
}

/// Token-to-index map with reserved padding (0) and unknown (1) slots.
/// Rebuilding from the same corpus and settings yields the same map.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Tokens with frequency >= `min_frequency` get indices starting at 2,
    /// assigned in (frequency descending, then lexicographic) order.
    pub fn build(corpus: &Corpus, min_frequency: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in &corpus.documents {
            for tok in &doc.tokens {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_frequency)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens: Vec<String> = entries.into_iter().map(|(t, _)| t.to_string()).collect();
        Ok(Self::from_tokens(tokens, min_frequency))
    }

    /// Rebuilds a vocabulary from an ordered token list (index 2 onward),
    /// as stored in checkpoints.
    pub fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + 2) as u32))
            .collect();
        Vocabulary { tokens, index, min_frequency }
    }

    /// Total index space including the two reserved slots.
    pub fn size(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    /// Index for a token; unknown tokens map to [`UNK_INDEX`].
    pub fn index_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    /// Ordered non-reserved tokens (index 2 onward).
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A document mapped into vocabulary indices, truncated and padded to a
/// fixed length. The effective length excludes padding and is what the
/// explanation and loss code iterate over.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDoc {
    pub id: String,
    pub indices: Vec<u32>,
    pub length: usize,
    pub label: usize,
    /// Token-level rationale, truncated along with the tokens.
    pub rationale: Option<Vec<u8>>,
    /// Sentence spans over the truncated token prefix `[0, length)`.
    pub sentences: Vec<Span>,
}

impl EncodedDoc {
    /// The real (non-padding) token indices.
    pub fn real_indices(&self) -> &[u32] {
        &self.indices[..self.length]
    }
}

/// Encodes a document: the first `max_len` tokens are kept, the rationale
/// prefix stays aligned, and padding index 0 fills the remainder.
pub fn encode(doc: &Document, vocab: &Vocabulary, max_len: usize) -> EncodedDoc {
    assert!(max_len >= 1, "max_len must be positive");
    let length = doc.tokens.len().min(max_len);
    let mut indices: Vec<u32> = doc.tokens[..length]
        .iter()
        .map(|t| vocab.index_of(t))
        .collect();
    indices.resize(max_len, PAD_INDEX);
    let rationale = doc.rationale.as_ref().map(|r| r[..length].to_vec());
    let sentences = segment_tokens(&doc.tokens[..length]);
    EncodedDoc { id: doc.id.clone(), indices, length, label: doc.label, rationale, sentences }
}

/// Encodes every document of a corpus.
pub fn encode_corpus(corpus: &Corpus, vocab: &Vocabulary, max_len: usize) -> Vec<EncodedDoc> {
    corpus.documents.iter().map(|d| encode(d, vocab, max_len)).collect()
}

/// Tokens that end a sentence.
const SENTENCE_TERMINATORS: [&str; 4] = [".", "!", "?", ";"];

/// Splits a token sequence into sentence spans. Boundaries fall after
/// terminator tokens; a trailing span without a terminator is kept. The
/// spans partition `[0, len)`.
pub fn segment_tokens(tokens: &[String]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, tok) in tokens.iter().enumerate() {
        if SENTENCE_TERMINATORS.contains(&tok.as_str()) {
            spans.push(Span::new(start, i + 1));
            start = i + 1;
        }
    }
    if start < tokens.len() {
        spans.push(Span::new(start, tokens.len()));
    }
    spans
}

/// Sentence spans of a document's full token list.
pub fn sentence_segment(doc: &Document) -> Vec<Span> {
    segment_tokens(&doc.tokens)
}

/// Appends, for every rationale-bearing document, a new document whose
/// tokens are exactly the rationale-marked ones (original order, same
/// label, all-ones rationale). Existing documents are never modified.
/// Documents whose rationale marks nothing are skipped with a warning.
pub fn augment_with_rationales(corpus: &Corpus) -> Result<Corpus> {
    let mut documents = corpus.documents.clone();
    for doc in &corpus.documents {
        let rationale = match &doc.rationale {
            Some(r) => r,
            None => continue,
        };
        let kept: Vec<String> = doc
            .tokens
            .iter()
            .zip(rationale)
            .filter(|&(_, &m)| m == 1)
            .map(|(t, _)| t.clone())
            .collect();
        if kept.is_empty() {
            log::warn!("document {}: rationale marks no tokens, not augmented", doc.id);
            continue;
        }
        let ones = vec![1u8; kept.len()];
        documents.push(Document {
            id: format!("{}-rationale", doc.id),
            tokens: kept,
            label: doc.label,
            rationale: Some(ones),
        });
    }
    Corpus::new(documents, corpus.num_classes, corpus.split)
}

/// Lowercase whitespace/punctuation tokenization for raw text. This path
/// carries no rationale; pre-tokenized JSON-lines input is the aligned one.
pub fn tokenize_raw(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    fn doc(id: &str, words: &[&str], label: usize) -> Document {
        Document { id: id.into(), tokens: toks(words), label, rationale: None }
    }

    #[test]
    fn load_corpus_parses_documents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"d1\",\"tokens\":[\"good\",\"film\"],\"label\":1,\"rationale\":[1,0]}\n",
                "{\"id\":\"d2\",\"tokens\":[\"bad\"],\"label\":0,\"extra\":42}\n",
            ),
        )
        .unwrap();
        let corpus = load_corpus(&path, 2, Split::Train).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.documents[0].rationale, Some(vec![1, 0]));
        assert!(corpus.documents[1].rationale.is_none());
    }

    #[test]
    fn load_corpus_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "{\"id\":\"d1\",\"tokens\":[\"a\"],\"label\":0}\nnot json\n").unwrap();
        let err = load_corpus(&path, 2, Split::Train).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{}", err);
    }

    #[test]
    fn rationale_length_mismatch_names_document() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"d1\",\"tokens\":[\"a\",\"b\"],\"label\":0,\"rationale\":[1,0,1]}\n",
        )
        .unwrap();
        let err = load_corpus(&path, 2, Split::Train).unwrap_err();
        assert!(err.to_string().contains("d1"), "{}", err);
    }

    #[test]
    fn vocabulary_frequency_then_lexicographic() {
        let docs = vec![
            doc("1", &["b", "b", "b", "a"], 0),
            doc("2", &["a", "a", "c"], 0),
        ];
        let corpus = Corpus::new(docs, 1, Split::Train).unwrap();
        let vocab = Vocabulary::build(&corpus, 2).unwrap();
        // a and b both occur 3 times; a wins the tie lexicographically.
        assert_eq!(vocab.index_of("a"), 2);
        assert_eq!(vocab.index_of("b"), 3);
        assert_eq!(vocab.index_of("c"), UNK_INDEX);
        assert_eq!(vocab.size(), 4);
    }

    #[test]
    fn vocabulary_rebuild_identical() {
        let docs = vec![doc("1", &["x", "y", "x", "z"], 0)];
        let corpus = Corpus::new(docs, 1, Split::Train).unwrap();
        let v1 = Vocabulary::build(&corpus, 1).unwrap();
        let v2 = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v1.tokens(), v2.tokens());
    }

    #[test]
    fn empty_corpus_rejected_by_vocabulary() {
        let corpus = Corpus::new(vec![], 2, Split::Train).unwrap();
        assert!(Vocabulary::build(&corpus, 1).is_err());
    }

    #[test]
    fn encode_pads_and_truncates() {
        let corpus = Corpus::new(vec![doc("1", &["good", "film"], 0)], 1, Split::Train).unwrap();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let enc = encode(&corpus.documents[0], &vocab, 4);
        assert_eq!(enc.length, 2);
        assert_eq!(enc.indices.len(), 4);
        assert_eq!(&enc.indices[2..], &[PAD_INDEX, PAD_INDEX]);
    }

    #[test]
    fn encode_truncates_rationale_consistently() {
        let d = Document {
            id: "1".into(),
            tokens: toks(&["a", "b", "c"]),
            label: 0,
            rationale: Some(vec![1, 0, 1]),
        };
        let corpus = Corpus::new(vec![d.clone()], 1, Split::Train).unwrap();
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let enc = encode(&d, &vocab, 2);
        assert_eq!(enc.rationale, Some(vec![1, 0]));
    }

    #[test]
    fn encode_all_unknown_is_valid() {
        let corpus = Corpus::new(vec![doc("1", &["zz", "qq"], 0)], 1, Split::Train).unwrap();
        let vocab = Vocabulary::from_tokens(vec!["other".into()], 1);
        let enc = encode(&corpus.documents[0], &vocab, 2);
        assert_eq!(enc.real_indices(), &[UNK_INDEX, UNK_INDEX]);
    }

    #[test]
    fn segment_splits_on_terminators() {
        let spans = segment_tokens(&toks(&["good", ".", "bad", "."]));
        assert_eq!(spans, vec![Span::new(0, 2), Span::new(2, 4)]);
    }

    #[test]
    fn segment_without_punctuation_is_single_span() {
        let spans = segment_tokens(&toks(&["a", "b", "c"]));
        assert_eq!(spans, vec![Span::new(0, 3)]);
    }

    #[test]
    fn segment_empty_is_empty() {
        assert!(segment_tokens(&[]).is_empty());
    }

    #[test]
    fn augment_extracts_marked_tokens() {
        let d = Document {
            id: "d".into(),
            tokens: toks(&["a", "b", "c"]),
            label: 1,
            rationale: Some(vec![0, 1, 1]),
        };
        let corpus = Corpus::new(vec![d], 2, Split::Train).unwrap();
        let out = augment_with_rationales(&corpus).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.documents[1].tokens, toks(&["b", "c"]));
        assert_eq!(out.documents[1].label, 1);
        assert_eq!(out.documents[1].rationale, Some(vec![1, 1]));
    }

    #[test]
    fn augment_without_rationales_is_identity() {
        let corpus = Corpus::new(vec![doc("d", &["a"], 0)], 1, Split::Train).unwrap();
        let out = augment_with_rationales(&corpus).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn augment_skips_empty_masks_and_doubles_full_corpora() {
        let mut docs = Vec::new();
        for i in 0..10 {
            docs.push(Document {
                id: format!("d{}", i),
                tokens: toks(&["a", "b"]),
                label: 0,
                rationale: Some(vec![1, 0]),
            });
        }
        docs.push(Document {
            id: "empty".into(),
            tokens: toks(&["a"]),
            label: 0,
            rationale: Some(vec![0]),
        });
        let corpus = Corpus::new(docs, 1, Split::Train).unwrap();
        let out = augment_with_rationales(&corpus).unwrap();
        // 11 originals + 10 extracted; the all-zero mask is skipped.
        assert_eq!(out.len(), 21);
    }

    #[test]
    fn tokenize_raw_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize_raw("Good, film!"),
            toks(&["good", ",", "film", "!"])
        );
    }
}
