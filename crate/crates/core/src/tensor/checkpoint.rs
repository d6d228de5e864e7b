//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic `LSCKPT01`, a little-endian `u64` header length, a
//! JSON header listing every entry `(name, dtype, shape, offset)`, then the
//! little-endian payload. Offsets are relative to the start of the payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"LSCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct AliasEntry {
    name: String,
    target: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    tensors: Vec<Entry>,
    #[serde(default)]
    aliases: Vec<AliasEntry>,
}

/// Parameters plus free-form string metadata (model kind, config text).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub metadata: BTreeMap<String, String>,
}

pub fn encode_checkpoint(
    store: &ParamStore,
    metadata: &BTreeMap<String, String>,
    dtype: Dtype,
) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for id in store.ids() {
        let t = store.get(id);
        tensors.push(Entry {
            name: store.canonical_name(id).to_string(),
            dtype,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.data() {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let aliases = store
        .aliases()
        .into_iter()
        .map(|(name, target)| AliasEntry { name, target })
        .collect();
    let header = Header {
        metadata: metadata.clone(),
        tensors,
        aliases,
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let bad = |m: &str| CheckpointError::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing LSCKPT01 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| CheckpointError::Format(format!("header json: {e}")))?;
    let payload = &body[hlen..];
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * e.dtype.width();
        if end > payload.len() {
            return Err(CheckpointError::Format(format!(
                "entry {} runs past the payload",
                e.name
            )));
        }
        let raw = &payload[e.offset..end];
        let data: Vec<f64> = match e.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let t = Tensor::new(e.shape, data).map_err(|err| CheckpointError::Format(err.to_string()))?;
        store.insert(e.name, t);
    }
    for a in header.aliases {
        store
            .alias(a.name, &a.target)
            .map_err(|err| CheckpointError::Format(err.to_string()))?;
    }
    Ok(Checkpoint {
        params: store,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    metadata: &BTreeMap<String, String>,
    dtype: Dtype,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(store, metadata, dtype);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::row(vec![0.1, -2.5, 3.0]));
        s.insert("b", Tensor::matrix(2, 1, vec![1e-3, 7.0]).unwrap());
        s.alias("c", "a").unwrap();
        s
    }

    #[test]
    fn f64_round_trip_is_exact_and_keeps_aliases() {
        let store = sample_store();
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "test".to_string());
        let ck = decode_checkpoint(&encode_checkpoint(&store, &meta, Dtype::F64)).unwrap();
        assert_eq!(ck.metadata, meta);
        assert_eq!(ck.params.by_name("a"), store.by_name("a"));
        assert_eq!(ck.params.by_name("b"), store.by_name("b"));
        assert_eq!(ck.params.id("c"), ck.params.id("a"));
    }

    #[test]
    fn f32_storage_rounds_to_single_precision() {
        let store = sample_store();
        let ck = decode_checkpoint(&encode_checkpoint(&store, &BTreeMap::new(), Dtype::F32)).unwrap();
        let a = ck.params.by_name("a").unwrap();
        assert_eq!(a.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_checkpoint(b"not a checkpoint at all").is_err());
        let mut bytes = encode_checkpoint(&sample_store(), &BTreeMap::new(), Dtype::F64);
        bytes.truncate(bytes.len() - 3);
        assert!(decode_checkpoint(&bytes).is_err());
    }
}
