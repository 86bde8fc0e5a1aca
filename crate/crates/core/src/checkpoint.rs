//! Binary checkpoint format.
//!
//! ```text
//! b"MCQA-CKPT-1\n"            magic
//! u64 little-endian           manifest length in bytes
//! JSON manifest               format, configs, vocab, tensor table
//! f32 little-endian data      tensors back to back, in table order
//! ```
//!
//! Tensor offsets are byte offsets into the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelOptions};

pub const FORMAT: &str = "MCQA-CKPT-1";
pub const MAGIC: &[u8; 12] = b"MCQA-CKPT-1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub options: ModelOptions,
    /// Surface tokens after the reserved ids, when a vocabulary is bundled.
    pub vocab: Option<Vec<String>>,
    pub tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(model: &ModelBundle<f32>, vocab: Option<&Vocab>) -> Result<Vec<u8>> {
    if let Some(v) = vocab {
        if v.len() != model.encoder.vocab_size() {
            return Err(bad(format!(
                "vocabulary has {} ids but the model embeds {}",
                v.len(),
                model.encoder.vocab_size()
            )));
        }
    }
    let tensors = model.tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, m) in &tensors {
        if !m.all_finite() {
            return Err(bad(format!("tensor {name} holds non-finite values")));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            offset,
        });
        offset += 4 * m.len() as u64;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        encoder: model.encoder.config,
        vocab_size: model.encoder.vocab_size(),
        options: model.options,
        vocab: vocab.map(|v| v.surface_tokens().to_vec()),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in &tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rejects configurations whose tensors could not fit in `elements` values,
/// before anything is allocated from untrusted sizes.
fn check_dims(manifest: &Manifest, elements: usize) -> Result<()> {
    let c = &manifest.encoder;
    let products = [
        manifest.vocab_size.checked_mul(c.d_model),
        c.max_len.checked_mul(c.d_model),
        c.d_model
            .checked_mul(c.d_model)
            .and_then(|dd| dd.checked_mul(4))
            .and_then(|a| c.d_ff.checked_mul(c.d_model)?.checked_mul(2)?.checked_add(a))
            .and_then(|per_layer| per_layer.checked_mul(c.n_layers)),
    ];
    for p in products {
        match p {
            Some(v) if v <= elements => {}
            _ => return Err(bad("configuration does not match the tensor data size")),
        }
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelBundle<f32>, Option<Vocab>)> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| bad("missing checkpoint magic"))?;
    if rest.len() < 8 {
        return Err(bad("truncated manifest length"));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes"));
    if len > rest.len() as u64 {
        return Err(bad(format!("manifest length {len} exceeds file size")));
    }
    let (json, data) = rest.split_at(len as usize);
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(bad(format!("unsupported format {:?}", manifest.format)));
    }
    manifest.encoder.validate()?;
    manifest.options.validate()?;
    if data.len() % 4 != 0 {
        return Err(bad("data section is not a whole number of f32 values"));
    }
    let elements = data.len() / 4;
    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        if e.offset != expected_offset {
            return Err(bad(format!("tensor {} at offset {} expected {expected_offset}", e.name, e.offset)));
        }
        let n = e.shape[0]
            .checked_mul(e.shape[1])
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad(format!("tensor {} shape overflows", e.name)))?;
        expected_offset = expected_offset
            .checked_add(n as u64)
            .ok_or_else(|| bad("tensor table overflows"))?;
    }
    if expected_offset != data.len() as u64 {
        return Err(bad(format!(
            "tensor table covers {expected_offset} bytes but data has {}",
            data.len()
        )));
    }
    check_dims(&manifest, elements)?;

    let mut model = ModelBundle::<f32>::init(manifest.encoder, manifest.vocab_size, manifest.options, 0)?;
    let names: Vec<(String, (usize, usize))> = model.tensors().iter().map(|(n, m)| (n.clone(), m.shape())).collect();
    if names.len() != manifest.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, manifest lists {}",
            names.len(),
            manifest.tensors.len()
        )));
    }
    for ((name, shape), e) in names.iter().zip(&manifest.tensors) {
        if *name != e.name || *shape != (e.shape[0], e.shape[1]) {
            return Err(bad(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                e.name, e.shape
            )));
        }
    }
    for (m, e) in model.tensors_mut().into_iter().zip(&manifest.tensors) {
        let start = e.offset as usize;
        for (v, chunk) in m.data_mut().iter_mut().zip(data[start..].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        if !m.all_finite() {
            return Err(bad(format!("tensor {} holds non-finite values", e.name)));
        }
    }
    let vocab = match manifest.vocab {
        None => None,
        Some(tokens) => {
            let v = Vocab::from_surface_tokens(&tokens)?;
            if v.len() != manifest.vocab_size {
                return Err(bad(format!(
                    "bundled vocabulary has {} ids but vocab_size is {}",
                    v.len(),
                    manifest.vocab_size
                )));
            }
            Some(v)
        }
    };
    Ok((model, vocab))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ModelBundle<f32>, vocab: Option<&Vocab>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, vocab)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelBundle<f32>, Option<Vocab>)> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_vocab;
    use crate::model::Scheme;
    use crate::pooling::PoolingKind;

    fn small() -> ModelBundle<f32> {
        let cfg = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 32,
            dropout: 0.0,
        };
        let opts = ModelOptions {
            scheme: Scheme::SinglePass,
            pooling: PoolingKind::Attentive,
            gate: true,
            ..ModelOptions::default()
        };
        ModelBundle::init(cfg, synthetic_vocab().len(), opts, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small();
        let v = synthetic_vocab();
        let bytes = encode_checkpoint(&m, Some(&v)).unwrap();
        assert!(bytes.starts_with(MAGIC));
        let (back, vocab) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(vocab.unwrap(), v);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&small(), None).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(&bytes[1..]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(decode_checkpoint(&extra).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_checkpoint(&nan).is_err());
        let mut huge = bytes;
        huge[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_checkpoint(&huge).is_err());
    }
}
