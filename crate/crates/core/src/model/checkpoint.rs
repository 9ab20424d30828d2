//! The `FVE1` parameter container.
//!
//! Layout: the four bytes `FVE1`, a little-endian `u32` header length, a UTF-8
//! JSON header (an array of `{name, shape, dtype}` in storage order), then the
//! raw little-endian `f32` data of every entry concatenated in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FVE1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an FVE1 checkpoint (magic {0:02x?})")]
    BadMagic(Vec<u8>),
    #[error("header length {declared} exceeds the {available} bytes after the length field")]
    HeaderLength { declared: usize, available: usize },
    #[error("bad header: {0}")]
    Header(String),
    #[error("data section holds {available} bytes, header describes {needed}")]
    DataLength { needed: usize, available: usize },
    #[error("checkpoint does not match the model:\n  {}", .0.join("\n  "))]
    Mismatch(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

/// Parameters read from (or destined for) a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header: Vec<Entry> = self
            .tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect();
        let json = serde_json::to_vec(&header).expect("header serialises");
        let data_len: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(8 + json.len() + data_len);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(
                bytes[..bytes.len().min(4)].to_vec(),
            ));
        }
        let declared = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let rest = &bytes[8..];
        if declared > rest.len() {
            return Err(CheckpointError::HeaderLength {
                declared,
                available: rest.len(),
            });
        }
        let header: Vec<Entry> = serde_json::from_slice(&rest[..declared])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let data = &rest[declared..];
        let mut needed = 0usize;
        for e in &header {
            if e.dtype != "f32" {
                return Err(CheckpointError::Header(format!(
                    "{}: unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            needed += e.shape.iter().product::<usize>() * 4;
        }
        if needed != data.len() {
            return Err(CheckpointError::DataLength {
                needed,
                available: data.len(),
            });
        }
        let mut tensors = Vec::with_capacity(header.len());
        let mut at = 0;
        for e in header {
            let n: usize = e.shape.iter().product();
            let values = data[at..at + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at += n * 4;
            let t = Tensor::new(&e.shape, values)
                .map_err(|err| CheckpointError::Header(err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Self { tensors })
    }

    /// Copies every store parameter whose name starts with one of `prefixes`
    /// (all parameters when empty) from the checkpoint. Nothing is written
    /// unless every selected name is present with a matching shape. A full
    /// restore also rejects checkpoint entries the store does not have.
    /// Returns the number of parameters restored.
    pub fn restore(
        &self,
        store: &mut ParamStore<f32>,
        prefixes: &[&str],
    ) -> Result<usize, CheckpointError> {
        let selected =
            |name: &str| prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p));
        let mut diffs = Vec::new();
        let mut plan = Vec::new();
        for (id, p) in store.iter() {
            if !selected(&p.name) {
                continue;
            }
            match self.get(&p.name) {
                None => diffs.push(format!("missing {}", p.name)),
                Some(t) if t.shape() != p.value.shape() => diffs.push(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )),
                Some(t) => plan.push((id, t)),
            }
        }
        if prefixes.is_empty() {
            for (name, _) in &self.tensors {
                if store.id(name).is_none() {
                    diffs.push(format!("unexpected {name}"));
                }
            }
        }
        if !diffs.is_empty() {
            return Err(CheckpointError::Mismatch(diffs));
        }
        let count = plan.len();
        for (id, t) in plan {
            store.get_mut(id).value = t.clone();
        }
        Ok(count)
    }
}

pub fn save_checkpoint(
    store: &ParamStore<f32>,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    std::fs::write(path, Checkpoint::from_store(store).to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{Encoder, EncoderConfig};

    fn store(seed: u64) -> ParamStore<f32> {
        let cfg = EncoderConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            state_size: 2,
            patch_size: 4,
            patch_count: 2,
            pos_hidden: 4,
            head_hidden: 8,
            ..EncoderConfig::default()
        };
        let mut s = ParamStore::new();
        Encoder::new(cfg, &mut s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = store(1);
        let bytes = Checkpoint::from_store(&s).to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes(), bytes);
        let mut t = store(2);
        assert_eq!(ck.restore(&mut t, &[]).unwrap(), s.len());
        for ((_, a), (_, b)) in s.iter().zip(t.iter()) {
            let (a, b): (Vec<u32>, Vec<u32>) = (
                a.value.data().iter().map(|v| v.to_bits()).collect(),
                b.value.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(a, b);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::from_store(&store(1)).to_bytes();
        assert_eq!(&bytes[..4], b"FVE1");
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        assert_eq!(header[0]["dtype"], "f32");
        assert_eq!(header[0]["name"], "encoder.prompt");
    }

    #[test]
    fn corrupted_header_length_loads_nothing() {
        let s = store(1);
        let mut bytes = Checkpoint::from_store(&s).to_bytes();
        bytes[4..8].copy_from_slice(&(u32::MAX).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::HeaderLength { .. })
        ));
        let mut bytes = Checkpoint::from_store(&s).to_bytes();
        bytes[4] = bytes[4].wrapping_add(3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes.truncate(3);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic(_))
        ));
    }

    #[test]
    fn truncated_data_is_rejected() {
        let mut bytes = Checkpoint::from_store(&store(1)).to_bytes();
        bytes.pop();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::DataLength { .. })
        ));
    }

    #[test]
    fn prefix_restore_touches_only_selected() {
        let src = store(1);
        let mut dst = store(2);
        let before = dst.clone();
        let ck = Checkpoint::from_store(&src);
        let n = ck.restore(&mut dst, &["head."]).unwrap();
        assert!(n > 0);
        for (((_, a), (_, b)), (_, c)) in src.iter().zip(dst.iter()).zip(before.iter()) {
            if a.name.starts_with("head.") {
                assert_eq!(a.value, b.value);
            } else {
                assert_eq!(b.value, c.value);
            }
        }
    }

    #[test]
    fn mismatch_lists_every_difference_and_writes_nothing() {
        let mut ck = Checkpoint::from_store(&store(1));
        ck.tensors.retain(|(n, _)| n != "encoder.prompt");
        ck.tensors[0].1 = Tensor::zeros(&[1, 1]);
        ck.tensors.push(("extra".into(), Tensor::zeros(&[1])));
        let mut dst = store(2);
        let before = dst.clone();
        match ck.restore(&mut dst, &[]) {
            Err(CheckpointError::Mismatch(d)) => {
                assert_eq!(d.len(), 3, "{d:?}");
                assert!(d.iter().any(|m| m.contains("missing encoder.prompt")));
                assert!(d.iter().any(|m| m.contains("unexpected extra")));
            }
            other => panic!("{other:?}"),
        }
        for ((_, a), (_, b)) in dst.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
