//! Parameter checkpoints: a JSON manifest (name → shape, offset) next to a
//! flat little-endian `f64` blob. Round-trips are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const FORMAT: &str = "ictlab-params";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step_count: u64,
    pub entries: Vec<EntryRecord>,
    /// Caller-supplied metadata (model config, method tag, ...).
    pub meta: serde_json::Value,
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn encode(params: &ParamStore, meta: serde_json::Value) -> (Manifest, Vec<u8>) {
    let mut entries = Vec::with_capacity(params.len());
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut offset = 0;
    for (name, t) in params.iter() {
        entries.push(EntryRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        step_count: params.step_count,
        entries,
        meta,
    };
    (manifest, blob)
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<ParamStore> {
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if blob.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("blob length {} not a multiple of 8", blob.len())));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut params = ParamStore::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("entry `{}` runs past blob end", e.name)))?;
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data.to_vec())?);
    }
    params.step_count = manifest.step_count;
    Ok(params)
}

/// Writes `path` (manifest) and `path.with_extension("bin")` (blob).
pub fn save(path: &Path, params: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let (manifest, blob) = encode(params, meta);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let bin = blob_path(path);
    fs::write(&bin, blob).map_err(|e| Error::io(bin, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, Manifest)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let bin = blob_path(path);
    let blob = fs::read(&bin).map_err(|e| Error::io(bin, e))?;
    let params = decode(&manifest, &blob)?;
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            a in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20),
            b in prop::collection::vec(-1e300f64..1e300, 6),
            steps in any::<u64>(),
        ) {
            let mut p = ParamStore::new();
            p.insert("layer.a", Tensor::vector(a));
            p.insert("layer.b", Tensor::matrix(2, 3, b).unwrap());
            p.step_count = steps;
            let (m, blob) = encode(&p, serde_json::json!({"k": 1}));
            let back = decode(&m, &blob).unwrap();
            prop_assert!(back.bitwise_eq(&p));
            prop_assert_eq!(back.step_count, steps);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![0.1, -0.0, f64::MIN_POSITIVE]));
        save(&path, &p, serde_json::json!({"method": "ict"})).unwrap();
        let (back, manifest) = load(&path).unwrap();
        assert!(back.bitwise_eq(&p));
        assert_eq!(manifest.meta["method"], "ict");
        assert_eq!(manifest.entries[0].shape, vec![3]);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let (m, blob) = encode(&p, serde_json::Value::Null);
        assert!(decode(&m, &blob[..8]).is_err());
    }
}
