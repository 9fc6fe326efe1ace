//! Checkpoint container.
//!
//! Layout: one line of UTF-8 JSON (the header) terminated by `\n`, followed
//! by the concatenated little-endian `f64` blobs. Each header tensor entry
//! records its byte offset relative to the first blob byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "avatar-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub build_id: String,
    pub step: u64,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub build_id: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(build_id: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            build_id: build_id.into(),
            step: 0,
            config,
            metadata: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), Tensor { shape, data });
    }

    /// Copies every tensor of a parameter store under its own name.
    pub fn insert_store(&mut self, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.insert(p.name.clone(), p.shape.clone(), p.value.clone());
        }
        self.step = store.step();
    }

    /// Overwrites store values from same-named tensors; every store tensor must be present.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), NnError> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.shape.clone())).collect();
        for (id, name, shape) in ids {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(NnError::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match model {:?}",
                    t.shape, shape
                )));
            }
            store.value_mut(id).copy_from_slice(&t.data);
        }
        store.set_step(self.step);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                dtype: "f64".into(),
                offset,
            });
            offset += 8 * t.data.len() as u64;
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            build_id: self.build_id.clone(),
            step: self.step,
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        out.push(b'\n');
        out.reserve(offset as usize);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| NnError::Checkpoint("missing header terminator".into()))?;
        let raw: serde_json::Value =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| NnError::Checkpoint(format!("header: {e}")))?;
        let version = raw
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| NnError::Checkpoint("header has no version field".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(NnError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: CheckpointHeader =
            serde_json::from_value(raw).map_err(|e| NnError::Checkpoint(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(NnError::Checkpoint(format!("unknown format {}", header.format)));
        }
        let blob = &bytes[nl + 1..];
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(NnError::Checkpoint(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > blob.len() {
                return Err(NnError::Checkpoint(format!("tensor {} runs past end of file", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(
                e.name.clone(),
                Tensor {
                    shape: e.shape.clone(),
                    data,
                },
            );
        }
        Ok(Self {
            build_id: header.build_id,
            step: header.step,
            config: header.config,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::ParamGroup;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(a in proptest::collection::vec(-1e6f64..1e6, 1..20), b in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..8)) {
            let mut ck = Checkpoint::new("test", serde_json::json!({"k": 1}));
            ck.insert("a", vec![a.len()], a.clone());
            ck.insert("gaussians/b", vec![b.len()], b.clone());
            ck.metadata.insert("ablation".into(), serde_json::json!(["no_lstm"]));
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let ck = Checkpoint::new("x", serde_json::Value::Null);
        let bytes = ck.to_bytes().unwrap();
        let text = String::from_utf8(bytes).unwrap().replace("\"version\":1", "\"version\":99");
        let err = Checkpoint::from_bytes(text.as_bytes()).unwrap_err();
        assert!(matches!(err, NnError::VersionMismatch { found: 99, .. }));
    }

    #[test]
    fn store_round_trip() {
        let mut s = ParamStore::new();
        let id = s.add("w", &[2, 2], ParamGroup::Network, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut ck = Checkpoint::new("x", serde_json::Value::Null);
        ck.insert_store(&s);
        s.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        ck.load_into(&mut s).unwrap();
        assert_eq!(s.value(id), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn header_lists_offsets() {
        let mut ck = Checkpoint::new("x", serde_json::Value::Null);
        ck.insert("a", vec![3], vec![1.0; 3]);
        ck.insert("b", vec![2], vec![2.0; 2]);
        let bytes = ck.to_bytes().unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let h: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(h.tensors[1].offset, 24);
        assert_eq!(bytes.len() - nl - 1, 40);
    }
}
