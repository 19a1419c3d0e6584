//! Parameter checkpoints: a JSON manifest plus a little-endian value blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn manifest_of<T: Real>(store: &ParamStore<T>) -> Manifest {
    Manifest {
        params: store
            .iter()
            .map(|(_, name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
            })
            .collect(),
        config_hash: None,
    }
}

/// Raw little-endian values in manifest order.
pub fn encode_blob<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.flat_len() * T::BYTES);
    for v in store.flat() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode<T: Real>(manifest: &Manifest, blob: &[u8]) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    let mut rest = blob;
    for entry in &manifest.params {
        if entry.dtype != T::DTYPE {
            return Err(Error::Parse {
                field: format!("{}.dtype", entry.name),
                message: format!("expected {}, found {}", T::DTYPE, entry.dtype),
            });
        }
        let n: usize = entry.shape.iter().product();
        let bytes = n * T::BYTES;
        if rest.len() < bytes {
            return Err(Error::Parse {
                field: entry.name.clone(),
                message: "value blob truncated".into(),
            });
        }
        let (head, tail) = rest.split_at(bytes);
        let data = head.chunks_exact(T::BYTES).map(T::read_le).collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(Error::Parse {
            field: "blob".into(),
            message: format!("{} trailing bytes", rest.len()),
        });
    }
    Ok(store)
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`.
pub fn save<T: Real>(store: &ParamStore<T>, dir: &Path, stem: &str, config_hash: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = manifest_of(store);
    manifest.config_hash = config_hash.map(str::to_string);
    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let bin_path = dir.join(format!("{stem}.bin"));
    fs::write(&bin_path, encode_blob(store)).map_err(|e| Error::io(&bin_path, e))
}

pub fn load<T: Real>(dir: &Path, stem: &str) -> Result<ParamStore<T>> {
    let json_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let manifest: Manifest = serde_path_to_error::deserialize(de).map_err(Error::from_json)?;
    let bin_path = dir.join(format!("{stem}.bin"));
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    decode(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        store.insert_uniform("w", &[3, 5], 5, 1.0, &mut rng).unwrap();
        store.insert_uniform("b", &[5], 5, 1.0, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&store, dir.path(), "params", Some("abc")).unwrap();
        let back: ParamStore<f32> = load(dir.path(), "params").unwrap();
        let bits = |s: &ParamStore<f32>| s.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&store), bits(&back));
        assert_eq!(store, back);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert_const("w", &[2], 1.0).unwrap();
        let manifest = manifest_of(&store);
        assert!(decode::<f64>(&manifest, &encode_blob(&store)).is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert_const("w", &[4], 1.0).unwrap();
        let blob = encode_blob(&store);
        assert!(decode::<f32>(&manifest_of(&store), &blob[..8]).is_err());
    }
}
