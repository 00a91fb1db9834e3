//! Versioned binary checkpoints.
//!
//! Layout: magic, schema version, JSON header (kind, config snapshot,
//! training metadata), then named f32 tensors in insertion order. Load
//! followed by save reproduces the file byte-for-byte.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"GZKTCKPT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// "segmenter" | "encoder" | "gaze"
    pub kind: String,
    /// Config snapshot and training metadata, schema depends on `kind`.
    pub header: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, header: serde_json::Value, store: &ParamStore<f32>) -> Self {
        let tensors = store
            .iter()
            .map(|(name, value)| Tensor {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                data: value.iter().copied().collect(),
            })
            .collect();
        Checkpoint {
            kind: kind.to_string(),
            header,
            tensors,
        }
    }

    /// Copy tensors into a parameter store by exact name match. Every
    /// store parameter must be present with the right shape, and every
    /// tensor must land somewhere.
    pub fn load_into_store(&self, store: &mut ParamStore<f32>) -> Result<()> {
        self.load_into_store_mapped(store, |n| Some(n.to_string()))
    }

    /// Like [`Self::load_into_store`] but renaming tensors first; `map`
    /// returns the destination parameter name or `None` to skip.
    pub fn load_into_store_mapped(
        &self,
        store: &mut ParamStore<f32>,
        map: impl Fn(&str) -> Option<String>,
    ) -> Result<()> {
        let mut used = 0usize;
        for t in &self.tensors {
            let Some(dst) = map(&t.name) else {
                continue;
            };
            let id = store.id_by_name(&dst).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {} has no destination parameter {dst}", t.name))
            })?;
            let value = store.value_mut(id);
            if value.shape() != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {dst}: checkpoint {:?} vs model {:?}",
                    t.shape,
                    value.shape()
                )));
            }
            for (v, &d) in value.iter_mut().zip(&t.data) {
                *v = d;
            }
            used += 1;
        }
        if used == 0 {
            return Err(Error::Checkpoint("no tensors matched the model".into()));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        let kind = self.kind.as_bytes();
        buf.extend_from_slice(&(kind.len() as u32).to_le_bytes());
        buf.extend_from_slice(kind);
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            if *at + n > buf.len() {
                return Err(Error::Checkpoint("truncated checkpoint".into()));
            }
            let s = &buf[*at..*at + n];
            *at += n;
            Ok(s)
        };
        if take(&mut at, 8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        if version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported schema version {version}"
            )));
        }
        let kind_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let kind = String::from_utf8(take(&mut at, kind_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("kind not utf8".into()))?;
        let header_len = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(take(&mut at, header_len)?)
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        let n_tensors = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name not utf8".into()))?;
            let ndim = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize);
            }
            let len = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
            if len != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: length {len} does not match shape {shape:?}"
                )));
            }
            let raw = take(&mut at, len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if at != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            kind,
            header,
            tensors,
        })
    }
}

/// Hex SHA-256 of a file, for report metadata and determinism checks.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Hash of all parameter values in a store, in insertion order.
pub fn store_weights_sha(store: &ParamStore<f32>) -> String {
    let mut hasher = Sha256::new();
    for (name, value) in store.iter() {
        hasher.update(name.as_bytes());
        for &v in value.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::normal_init;
    use crate::rng::rng_for;

    fn sample_store() -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, "ckpt-test", 0);
        store.add("a.w", normal_init(&mut rng, &[3, 4], 0.5));
        store.add("a.b", normal_init(&mut rng, &[3], 0.1));
        store.add("b.w", normal_init(&mut rng, &[2, 3, 3, 3], 0.2));
        store
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample_store();
        let ckpt = Checkpoint::from_store(
            "segmenter",
            serde_json::json!({"epochs_trained": 3, "val_iou": [0.9, 0.8]}),
            &store,
        );
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.kind, "segmenter");
        assert_eq!(loaded.header["epochs_trained"], 3);
    }

    #[test]
    fn round_trip_restores_identical_weights() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample_store();
        let ckpt = Checkpoint::from_store("encoder", serde_json::json!({}), &store);
        let p = dir.path().join("w.ckpt");
        ckpt.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        let mut fresh = sample_store();
        // perturb, then restore
        for id in fresh.ids().collect::<Vec<_>>() {
            fresh.value_mut(id).fill(0.0);
        }
        loaded.load_into_store(&mut fresh).unwrap();
        for (id_a, id_b) in store.ids().zip(fresh.ids()) {
            assert_eq!(store.value_bytes(id_a), fresh.value_bytes(id_b));
        }
        assert_eq!(store_weights_sha(&store), store_weights_sha(&fresh));
    }

    #[test]
    fn shape_mismatch_and_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample_store();
        let ckpt = Checkpoint::from_store("encoder", serde_json::json!({}), &store);
        let p = dir.path().join("w.ckpt");
        ckpt.save(&p).unwrap();

        let mut other = ParamStore::<f32>::new();
        let mut rng = rng_for(2, "ckpt-test", 0);
        other.add("a.w", normal_init(&mut rng, &[4, 4], 0.5));
        let loaded = Checkpoint::load(&p).unwrap();
        assert!(loaded.load_into_store(&mut other).is_err());

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(Checkpoint::load(&bad).is_err());
    }
}
