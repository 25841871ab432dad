//! Versioned model checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON
//! header (format version, op catalog version, model config, vocabulary,
//! max_len, and a parameter manifest with name/shape/dtype/offset), then
//! the raw parameter payload as little-endian f64 bytes. Round-trips are
//! bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Param};
use crate::data::Vocabulary;
use crate::tensor::{Tensor, OP_CATALOG_VERSION};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CREXCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload.
    offset: u64,
    /// Number of f64 values.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    op_catalog_version: u32,
    config: ModelConfig,
    vocab_tokens: Vec<String>,
    vocab_min_frequency: usize,
    max_len: usize,
    params: Vec<ParamEntry>,
}

/// A loaded checkpoint: the model plus the vocabulary and encoding length
/// it was trained with.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub max_len: usize,
}

pub fn save_checkpoint(model: &Model, vocab: &Vocabulary, max_len: usize, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(model.params().len());
    let mut offset = 0u64;
    for p in model.params() {
        let len = p.tensor.len() as u64;
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            len,
        });
        offset += len * 8;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        op_catalog_version: OP_CATALOG_VERSION,
        config: model.config.clone(),
        vocab_tokens: vocab.tokens().to_vec(),
        vocab_min_frequency: vocab.min_frequency(),
        max_len,
        params: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for p in model.params() {
        for v in p.tensor.values() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {}", path.display(), e))
    })?;

    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {}", e)))?;

    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {})",
            header.format_version, FORMAT_VERSION
        )));
    }
    if header.op_catalog_version != OP_CATALOG_VERSION {
        return Err(Error::Checkpoint(format!(
            "op catalog version {} does not match this build ({})",
            header.op_catalog_version, OP_CATALOG_VERSION
        )));
    }

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    // Rebuild the parameter skeleton from the config and fill it by name;
    // any manifest drift (missing, extra, reshaped) is an error.
    let reference = Model::build(header.config.clone())?;
    if header.params.len() != reference.params().len() {
        return Err(Error::Checkpoint(format!(
            "manifest has {} parameters, config implies {}",
            header.params.len(),
            reference.params().len()
        )));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for (entry, expected) in header.params.iter().zip(reference.params()) {
        if entry.name != expected.name {
            return Err(Error::Checkpoint(format!(
                "manifest parameter {} where config implies {}",
                entry.name, expected.name
            )));
        }
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "parameter {}: dtype {} unsupported",
                entry.name, entry.dtype
            )));
        }
        if entry.shape != expected.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {}: shape {:?} does not match config shape {:?}",
                entry.name,
                entry.shape,
                expected.tensor.shape()
            )));
        }
        let count: usize = entry.shape.iter().product();
        if count as u64 != entry.len {
            return Err(Error::Checkpoint(format!(
                "parameter {}: shape {:?} disagrees with stored length {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {}: payload truncated ({} bytes, wants {})",
                entry.name,
                payload.len(),
                end
            )));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push(Param {
            name: entry.name.clone(),
            tensor: Tensor::new(entry.shape.clone(), values)?,
        });
    }

    let model = Model { config: header.config, params };
    let vocab = Vocabulary::from_tokens(header.vocab_tokens, header.vocab_min_frequency);
    if model.config.vocab_size != vocab.size() {
        return Err(Error::Checkpoint(format!(
            "config vocab_size {} does not match stored vocabulary ({})",
            model.config.vocab_size,
            vocab.size()
        )));
    }
    Ok(Checkpoint { model, vocab, max_len: header.max_len })
}
