//! Binary checkpoint: `FREE` magic, u32 version, u64 metadata length,
//! metadata JSON, then every tensor in canonical order as
//! `u32 name length, name, u32 rank, u64 dims…, f32 data…` (little endian).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encode::Vocabulary;
use crate::model::{FreeModel, ModelConfig};
use crate::tensor::ParamSet;

use super::{Phase, TrainError};

pub const MAGIC: &[u8; 4] = b"FREE";
pub const FORMAT_VERSION: u32 = 1;

/// Affine map between label units and the units the network is trained in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: f64,
    pub std: f64,
}

impl TargetScale {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { mean: 0.0, std: 1.0 };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        let std = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub phase: Phase,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub data_hash: String,
    /// Hash of the checkpoint this phase started from.
    pub parent: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub target_scale: TargetScale,
    pub max_len: usize,
    pub provenance: Vec<ProvenanceRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: FreeModel<f32>,
}

impl Checkpoint {
    pub fn vocabulary(&self) -> Result<Vocabulary, TrainError> {
        Ok(Vocabulary::from_tokens(self.meta.vocab.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("serializable");
        let mut out = Vec::with_capacity(meta.len() + 4 * self.model.param_count() + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let named = self.model.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(TrainError::Checkpoint(format!(
                "bad magic {:?} (expected \"FREE\")",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported version {version} (supported: {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| TrainError::Checkpoint(format!("metadata: {e}")))?;
        meta.model.encoder.validate()?;
        let mut model = FreeModel::<f32>::zeros(&meta.model);
        let expected: Vec<(String, Vec<usize>)> =
            model.named().into_iter().map(|(n, t)| (n, t.shape.clone())).collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(TrainError::Checkpoint(format!(
                "{count} tensors stored, architecture needs {}",
                expected.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(model.tensors_mut()) {
            let n = r.u32()? as usize;
            let stored = String::from_utf8_lossy(r.take(n)?).into_owned();
            if &stored != name {
                return Err(TrainError::Checkpoint(format!("expected tensor {name}, found {stored}")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if &dims != shape {
                return Err(TrainError::Checkpoint(format!("tensor {name}: shape {dims:?}, expected {shape:?}")));
            }
            let raw = r.take(4 * t.data.len())?;
            for (v, c) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if !model.all_finite() {
            return Err(TrainError::Checkpoint("non-finite parameter values".into()));
        }
        Ok(Self { meta, model })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn ensure_architecture(&self, expected: &ModelConfig) -> Result<(), TrainError> {
        if &self.meta.model != expected {
            return Err(TrainError::Architecture(format!(
                "checkpoint has {:?}, run expects {:?}",
                self.meta.model, expected
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            TrainError::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut cfg = ModelConfig::with_vocab(12);
        cfg.encoder.d_model = 8;
        cfg.encoder.n_layers = 1;
        cfg.encoder.n_heads = 2;
        cfg.encoder.d_ff = 16;
        cfg.encoder.max_len = 20;
        cfg.lstm_hidden = 4;
        let model = FreeModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let vocab = Vocabulary::build(["a b c d e f g h i"]);
        Checkpoint {
            meta: CheckpointMeta {
                model: ModelConfig { encoder: crate::encode::EncoderConfig { vocab_size: vocab.len(), ..cfg.encoder }, ..cfg },
                vocab: vocab.tokens().to_vec(),
                target_scale: TargetScale { mean: 9.5, std: 6.25 },
                max_len: 20,
                provenance: vec![],
            },
            model,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn header_errors() {
        let mut bytes = sample().to_bytes();
        bytes[3] = b'X';
        let e = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(e.contains("bad magic"), "{e}");

        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        let e = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(e.contains("unsupported version 999 (supported: 1)"), "{e}");

        let bytes = sample().to_bytes();
        for cut in [2, 10, 40, bytes.len() - 1] {
            let e = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err().to_string();
            assert!(e.contains("truncated"), "{cut}: {e}");
        }
    }

    #[test]
    fn architecture_check() {
        let ck = sample();
        assert!(ck.ensure_architecture(&ck.meta.model.clone()).is_ok());
        let other = ModelConfig { lstm_hidden: 5, ..ck.meta.model.clone() };
        assert!(matches!(ck.ensure_architecture(&other), Err(TrainError::Architecture(_))));
    }

    #[test]
    fn scale_round_trip() {
        let s = TargetScale::fit([1.0, 3.0, 5.0]);
        assert!((s.mean - 3.0).abs() < 1e-12);
        assert!((s.denormalize(s.normalize(7.25)) - 7.25).abs() < 1e-12);
        assert_eq!(TargetScale::fit([2.0, 2.0]).std, 1.0);
    }
}
