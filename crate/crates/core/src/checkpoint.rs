//! Binary checkpoints.
//!
//! Layout: the magic bytes `EGRUCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then the tensor
//! payloads as row-major little-endian `f64`. Offsets in the header are
//! relative to the start of the payload section. Prune masks are stored in
//! the header as base64 bitsets over row-major indices (bit set = weight
//! kept, least significant bit first).
//!
//! The embedding (and an untied decoder) is stored with logical shape
//! `[V, E]`: one row per token.

use std::io::Write;
use std::path::Path;

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::CODE_VERSION;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{LmConfig, LmModel};
use crate::tensor::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"EGRUCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kept_bits: String,
}

/// Provenance and progress information stored with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    /// Resolved run configuration (TOML), when written by a command.
    pub run_config: Option<String>,
    /// Free-form metrics such as the validation perplexity.
    pub metrics: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    code_version: String,
    model: LmConfig,
    meta: CheckpointMeta,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
    masks: Vec<MaskEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: LmModel,
    pub vocab: Vocab,
    pub meta: CheckpointMeta,
    pub code_version: String,
}

/// `(name, logical shape, row-major values)` of every stored tensor.
fn tensor_payloads(model: &LmModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    // E x V column-major storage is V x E row-major
    let token_rows = |m: &DenseMatrix| (vec![m.cols(), m.rows()], m.as_slice().to_vec());
    let mut out = Vec::new();
    let (shape, values) = token_rows(&model.embedding);
    out.push(("embedding".to_string(), shape, values));
    for (l, layer) in model.layers.iter().enumerate() {
        for (name, m) in layer.matrices() {
            out.push((
                format!("layers.{l}.{name}"),
                vec![m.rows(), m.cols()],
                m.to_row_major_values(),
            ));
        }
        for (name, v) in layer.vectors() {
            out.push((format!("layers.{l}.{name}"), vec![v.len()], v.clone()));
        }
    }
    if let Some(d) = &model.decoder {
        let (shape, values) = token_rows(d);
        out.push(("decoder".to_string(), shape, values));
    }
    out.push((
        "decoder_bias".to_string(),
        vec![model.decoder_bias.len()],
        model.decoder_bias.clone(),
    ));
    out
}

fn encode_bits(bits: impl Iterator<Item = bool>) -> String {
    let mut bytes = Vec::new();
    for (k, b) in bits.enumerate() {
        if k % 8 == 0 {
            bytes.push(0u8);
        }
        if b {
            *bytes.last_mut().expect("pushed above") |= 1 << (k % 8);
        }
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_bits(s: &str, len: usize) -> Result<Vec<bool>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Format(format!("bad mask encoding: {e}")))?;
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::Format("mask bitset has the wrong length".into()));
    }
    Ok((0..len).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect())
}

pub fn to_bytes(model: &LmModel, vocab: &Vocab, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if vocab.len() != model.vocab_size() {
        return Err(Error::Usage(format!(
            "vocabulary of {} tokens for a model with {} outputs",
            vocab.len(),
            model.vocab_size()
        )));
    }
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, shape, values) in tensor_payloads(model) {
        let offset = payload.len() as u64;
        for v in &values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f64".into(),
            offset,
            nbytes: (values.len() * 8) as u64,
        });
    }
    let masks = model
        .prunable()
        .into_iter()
        .map(|(name, m)| {
            let (rows, cols) = (m.rows(), m.cols());
            let kept = (0..rows)
                .flat_map(|i| (0..cols).map(move |j| (i, j)))
                .map(|(i, j)| m.is_kept(i, j));
            MaskEntry {
                name,
                shape: vec![rows, cols],
                kept_bits: encode_bits(kept),
            }
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        code_version: CODE_VERSION.to_string(),
        model: model.config.clone(),
        meta: meta.clone(),
        vocab: vocab.tokens().to_vec(),
        tensors,
        masks,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |msg: &str| Error::Format(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let payload = &bytes[payload_start..];

    let vocab = Vocab::from_tokens(header.vocab.clone())?;
    if vocab.len() != header.model.vocab_size {
        return Err(fail("vocabulary size does not match the model"));
    }
    header.model.validate()?;
    let mut model = LmModel::new(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;

    let expected = tensor_payloads(&model);
    if expected.len() != header.tensors.len() {
        return Err(fail("tensor list does not match the model layout"));
    }
    let mut loaded: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
    for ((name, shape, _), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape || entry.dtype != "f64" {
            return Err(Error::Format(format!(
                "unexpected tensor entry {}",
                entry.name
            )));
        }
        let n: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(n * 8)
            .ok_or_else(|| fail("tensor offset overflow"))?;
        if entry.nbytes as usize != n * 8 || end > payload.len() {
            return Err(Error::Format(format!("tensor {} is truncated", entry.name)));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "tensor {} holds non-finite values",
                entry.name
            )));
        }
        loaded.push(values);
    }

    let mut it = loaded.into_iter();
    let mut next = || it.next().expect("length checked above");
    let (v, e) = (model.embedding.cols(), model.embedding.rows());
    model.embedding = DenseMatrix::from_col_major(e, v, next())?;
    for layer in &mut model.layers {
        for (_, m) in layer.matrices_mut() {
            let dense = DenseMatrix::from_row_major(m.rows(), m.cols(), &next())?;
            *m = crate::tensor::MaskedMatrix::new(dense);
        }
        for (_, vec) in layer.vectors_mut() {
            *vec = next();
        }
    }
    if let Some(d) = &mut model.decoder {
        *d = DenseMatrix::from_col_major(d.rows(), d.cols(), next())?;
    }
    model.decoder_bias = next();

    let masks = &header.masks;
    let mut prunable = model.prunable_mut();
    if masks.len() != prunable.len() {
        return Err(fail("mask list does not match the model layout"));
    }
    for ((name, m), entry) in prunable.iter_mut().zip(masks) {
        if *name != entry.name || entry.shape != [m.rows(), m.cols()] {
            return Err(Error::Format(format!(
                "unexpected mask entry {}",
                entry.name
            )));
        }
        let (rows, cols) = (m.rows(), m.cols());
        let row_major = decode_bits(&entry.kept_bits, rows * cols)?;
        let mut col_major = vec![true; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                col_major[j * rows + i] = row_major[i * cols + j];
            }
        }
        m.set_mask(col_major)?;
        if m.values()
            .iter()
            .zip(m.mask())
            .any(|(&w, &k)| !k && w != 0.0)
        {
            return Err(Error::Format(format!(
                "masked weights of {name} are not zero"
            )));
        }
    }
    drop(prunable);

    Ok(Checkpoint {
        model,
        vocab,
        meta: header.meta,
        code_version: header.code_version,
    })
}

/// Writes the checkpoint through a temporary file and a rename.
pub fn save(path: &Path, model: &LmModel, vocab: &Vocab, meta: &CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(model, vocab, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
