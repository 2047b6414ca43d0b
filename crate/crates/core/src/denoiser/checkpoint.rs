use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Denoiser, ModelConfig};
use crate::numerics::{OptimizerState, ParamStore, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const MAGIC: &[u8; 8] = b"LDGMCKPT";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in floats.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    vocab_sizes: [usize; 5],
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
    train_config: Option<Value>,
    data_sha256: String,
}

/// A saved model with optional optimizer state and the training settings
/// it was produced with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Denoiser<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub train_config: Option<Value>,
    /// Hex SHA-256 of the manifest bytes.
    pub model_version: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(model: Denoiser<f32>, optimizer: Option<OptimizerState<f32>>, train_config: Option<Value>) -> Self {
        Self {
            model,
            optimizer,
            train_config,
            model_version: String::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>, tensors: &mut Vec<TensorEntry>| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: data.len() / 4,
                len: t.len(),
            });
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        };
        let names: Vec<String> = self.model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        for (_, name, t) in self.model.params.iter() {
            push(name.to_string(), t, &mut tensors);
        }
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != names.len() || opt.v.len() != names.len() {
                return Err(Error::Invariant("optimizer moments do not match parameters".into()));
            }
            for (name, t) in names.iter().zip(&opt.m) {
                push(format!("adam.m/{name}"), t, &mut tensors);
            }
            for (name, t) in names.iter().zip(&opt.v) {
                push(format!("adam.v/{name}"), t, &mut tensors);
            }
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.model.cfg,
            vocab_sizes: self.model.cfg.vocab_sizes,
            tensors,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry { step: o.step }),
            train_config: self.train_config.clone(),
            data_sha256: hex(&Sha256::digest(&data)),
        };
        let header = serde_json::to_vec(&manifest).map_err(|e| Error::Invariant(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |m: &str| Error::Integrity(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(integrity("missing checkpoint header"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header = bytes
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| integrity("truncated manifest"))?;
        let raw: Value = serde_json::from_slice(header).map_err(|e| integrity(&format!("manifest: {e}")))?;
        let version = raw.get("format_version").and_then(Value::as_u64);
        if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
            return Err(Error::IncompatibleCheckpoint(format!(
                "format version {version:?}, this build reads {CHECKPOINT_FORMAT_VERSION}"
            )));
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| Error::IncompatibleCheckpoint(format!("manifest: {e}")))?;
        if manifest.vocab_sizes != manifest.model.vocab_sizes {
            return Err(Error::IncompatibleCheckpoint("vocabulary sizes disagree with model config".into()));
        }
        let data = &bytes[16 + header_len..];
        let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
        if data.len() != total * 4 {
            return Err(integrity(&format!("data section has {} bytes, expected {}", data.len(), total * 4)));
        }
        if hex(&Sha256::digest(data)) != manifest.data_sha256 {
            return Err(integrity("data checksum mismatch"));
        }
        let read = |e: &TensorEntry| -> Result<Tensor<f32>> {
            if e.shape.iter().product::<usize>() != e.len || (e.offset + e.len) * 4 > data.len() {
                return Err(Error::Integrity(format!("bad table entry for {}", e.name)));
            }
            let vals = data[e.offset * 4..(e.offset + e.len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(&e.shape, vals)
        };
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &manifest.tensors {
            let t = read(e)?;
            if e.name.starts_with("adam.m/") {
                m.push(t);
            } else if e.name.starts_with("adam.v/") {
                v.push(t);
            } else {
                params.add(e.name.clone(), t);
            }
        }
        let model = Denoiser::from_params(manifest.model, params)?;
        let optimizer = match manifest.optimizer {
            Some(o) => {
                if m.len() != model.params.len() || v.len() != model.params.len() {
                    return Err(Error::IncompatibleCheckpoint("optimizer moments incomplete".into()));
                }
                Some(OptimizerState { step: o.step, m, v })
            }
            None => None,
        };
        Ok(Self {
            model,
            optimizer,
            train_config: manifest.train_config,
            model_version: hex(&Sha256::digest(header)),
        })
    }
}

/// Write a checkpoint and return its model version.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    let bytes = ckpt.to_bytes()?;
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let version = hex(&Sha256::digest(&bytes[16..16 + header_len]));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(version)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{tokenize, CanvasSpec, Element, Layout, QuantizerConfig};
    use crate::numerics::{AdamW, AdamWConfig, Gradients};

    fn model() -> Denoiser<f32> {
        let q = QuantizerConfig::new(4, 8).unwrap();
        let mut cfg = ModelConfig::toy(&q);
        cfg.d_model = 16;
        cfg.n_layers = 1;
        cfg.d_ffn = 32;
        cfg.n_heads = 2;
        Denoiser::new(cfg, 7).unwrap()
    }

    fn seqs() -> Vec<crate::layout::TokenSequence> {
        let q = QuantizerConfig::new(4, 8).unwrap();
        let l = Layout::new(
            CanvasSpec::new(10, 10).unwrap(),
            vec![Element::precise(0, 1, 2, 3, 4), Element::precise(3, 7, 6, 1, 1)],
        );
        vec![tokenize(&l, &q)]
    }

    #[test]
    fn round_trip_preserves_forward_outputs_and_moments() {
        let m = model();
        let mut params = m.params.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        let mut grads = Gradients::zeros_like(&params);
        for id in params.ids().collect::<Vec<_>>() {
            grads.get_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, g)| *g = (i as f32).sin());
        }
        opt.step(&mut params, &grads);
        let m = Denoiser::from_params(m.cfg, params).unwrap();
        let ck = Checkpoint::new(m.clone(), Some(opt.state.clone()), Some(serde_json::json!({"seed": 3})));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let version = save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model_version, version);
        assert_eq!(back.model.predict(&seqs()).unwrap(), m.predict(&seqs()).unwrap());
        assert_eq!(back.optimizer.unwrap(), opt.state);
        assert_eq!(back.train_config.unwrap()["seed"], 3);
    }

    #[test]
    fn bumped_version_is_refused() {
        let bytes = Checkpoint::new(model(), None, None).to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes[16..]).into_owned();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        assert!(text.contains("\"format_version\":1"));
        let bumped = header.replace("\"format_version\":1", "\"format_version\":2");
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(bumped.len() as u64).to_le_bytes());
        out.extend_from_slice(bumped.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        assert!(matches!(Checkpoint::from_bytes(&out), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn truncated_or_corrupted_data_is_an_integrity_error() {
        let bytes = Checkpoint::new(model(), None, None).to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Integrity(_))
        ));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(b"junk"), Err(Error::Integrity(_))));
    }
}
