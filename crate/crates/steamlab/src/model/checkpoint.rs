//! Checkpoint file format: magic bytes `STEAMCKPT1`, a little-endian u64
//! JSON-header length, the JSON header (config, vocabulary, training
//! metadata, named tensor index), then each tensor as row-major
//! little-endian f32. Compute upcasts to f64 after load.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use super::{ModelCheckpoint, ModelConfig, Tokenizer, TrainMeta, Weights};
use crate::error::{Error, Result};
use crate::fsio;

const MAGIC: &[u8; 10] = b"STEAMCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    meta: TrainMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    let tensors = ckpt.weights.tensors();
    let header = Header {
        config: ckpt.config.clone(),
        vocab: ckpt.tokenizer.words().to_vec(),
        meta: ckpt.meta.clone(),
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let hj = serde_json::to_vec(&header)?;
    let data_len: usize = tensors.iter().map(|t| t.data.len() * 4).sum();
    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + hj.len() + data_len);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(hj.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&hj);
    for t in &tensors {
        for &v in t.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fsio::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut off = MAGIC.len();
    let hlen = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    if hlen > bytes.len() - off {
        return Err(Error::Format("checkpoint header is truncated".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[off..off + hlen])?;
    off += hlen;
    header.config.validate()?;
    let tokenizer = Tokenizer::from_vocab(header.vocab)?;
    if tokenizer.vocab_size() != header.config.vocab {
        return Err(Error::Format(format!(
            "vocabulary holds {} words but config says {}",
            tokenizer.vocab_size(),
            header.config.vocab
        )));
    }
    let mut weights = Weights::zeros(&header.config);
    {
        let mut slots = weights.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, this architecture has {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        for (slot, entry) in slots.iter_mut().zip(&header.tensors) {
            if slot.name != entry.name || slot.shape != entry.shape {
                return Err(Error::Format(format!(
                    "tensor mismatch: file has '{}' {:?}, model expects '{}' {:?}",
                    entry.name, entry.shape, slot.name, slot.shape
                )));
            }
            let need = slot.data.len() * 4;
            if need > bytes.len() - off {
                return Err(Error::Format(format!(
                    "tensor '{}' is truncated",
                    entry.name
                )));
            }
            for (i, x) in slot.data.iter_mut().enumerate() {
                let raw: [u8; 4] = bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap();
                *x = f32::from_le_bytes(raw) as f64;
            }
            off += need;
        }
    }
    if off != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - off
        )));
    }
    Ok(ModelCheckpoint::new(
        header.config,
        tokenizer,
        weights,
        header.meta,
    ))
}

/// First 12 hex chars of sha256 over the f32 wire encoding of all tensors.
pub(crate) fn weights_digest(ckpt: &ModelCheckpoint) -> String {
    let mut hasher = Sha256::new();
    for t in ckpt.weights.tensors() {
        for &v in t.data {
            hasher.update((v as f32).to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest[..6].iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_ckpt() -> ModelCheckpoint {
        let cfg = ModelConfig {
            layers: 6,
            width: 8,
            heads: 2,
            mlp_width: 16,
            context: 12,
            vocab: 11,
            local_layers: 0,
            local_window: 0,
            learned_positions: true,
        };
        let weights = Weights::init(&cfg, 77).unwrap();
        let vocab: Vec<String> = (0..11).map(|i| format!("w{}", i)).collect();
        let meta = TrainMeta {
            steps: 42,
            epochs: 3,
            final_loss: 1.25,
            recall: 0.5,
            seed: 77,
        };
        ModelCheckpoint::new(cfg, Tokenizer::from_vocab(vocab).unwrap(), weights, meta)
    }

    #[test]
    fn round_trip_preserves_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = small_ckpt();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.tokenizer.words(), ckpt.tokenizer.words());
        assert_eq!(loaded.meta.steps, 42);
        assert_eq!(loaded.meta.final_loss, 1.25);
        assert_eq!(loaded.digest(), ckpt.digest());
        // values survive exactly at f32 precision
        for (a, b) in ckpt
            .weights
            .tensors()
            .iter()
            .zip(loaded.weights.tensors().iter())
        {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // a second load is byte-stable (f32 quantization is idempotent)
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "got: {}", err);
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &small_ckpt()).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_checkpoint(&cut).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got: {}", err);

        let fat = dir.path().join("fat.ckpt");
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 7]);
        std::fs::write(&fat, &extended).unwrap();
        let err = load_checkpoint(&fat).unwrap_err();
        assert!(err.to_string().contains("trailing"), "got: {}", err);
    }

    #[test]
    fn rejects_tensor_name_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &small_ckpt()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = b"tok_embed";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[at..at + needle.len()].copy_from_slice(b"tok_embef");
        let tampered = dir.path().join("tampered.ckpt");
        std::fs::write(&tampered, &bytes).unwrap();
        let err = load_checkpoint(&tampered).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "got: {}", err);
    }

    #[test]
    fn digest_distinguishes_weights() {
        let a = small_ckpt();
        let mut w = (*a.weights).clone();
        w.w_un[[0, 0]] += 1.0;
        let b = ModelCheckpoint::new(
            a.config.clone(),
            (*a.tokenizer).clone(),
            w,
            a.meta.clone(),
        );
        assert_eq!(a.digest().len(), 12);
        assert_ne!(a.digest(), b.digest());
    }
}
