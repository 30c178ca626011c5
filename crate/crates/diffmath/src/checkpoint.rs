//! Parameter checkpoints: a flat little-endian blob plus a JSON manifest
//! mapping tensor names to shape and byte offset.
//!
//! `<stem>.bin` holds the concatenated tensor data, `<stem>.json` the
//! manifest together with free-form model metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "vemfuse-checkpoint-v1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `params` under `stem` (`stem.bin` + `stem.json`).
pub fn save<T: Scalar>(stem: &Path, params: &ParamSet<T>, meta: serde_json::Value) -> Result<()> {
    let (bin, json) = paths(stem);
    if let Some(dir) = bin.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut blob = Vec::with_capacity(params.num_scalars() * T::BYTES);
    let mut tensors = Vec::with_capacity(params.len());
    for id in params.ids() {
        let v = params.value(id);
        tensors.push(TensorEntry {
            name: params.name(id).to_string(),
            shape: v.shape().to_vec(),
            offset: blob.len(),
        });
        for &x in v.data() {
            x.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: T::DTYPE.into(),
        tensors,
        meta,
    };
    fs::write(&bin, blob)?;
    fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(stem: &Path) -> Result<Manifest> {
    let (_, json) = paths(stem);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(json)?)?;
    if manifest.format != FORMAT {
        return Err(DiffError::Checkpoint(format!(
            "unknown format {}",
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint into a fresh parameter set in manifest order.
pub fn load<T: Scalar>(stem: &Path) -> Result<(ParamSet<T>, Manifest)> {
    let manifest = read_manifest(stem)?;
    if manifest.dtype != T::DTYPE {
        return Err(DiffError::Checkpoint(format!(
            "dtype {} does not match {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let (bin, _) = paths(stem);
    let blob = fs::read(bin)?;
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * T::BYTES;
        if end > blob.len() {
            return Err(DiffError::Checkpoint(format!(
                "tensor {} extends past the blob",
                e.name
            )));
        }
        let data = blob[e.offset..end]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        params.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let mut p = ParamSet::<f32>::new();
        p.add(
            "a",
            Tensor::matrix(2, 2, vec![1.5, -0.25, 3e-8, 7.0]).unwrap(),
        )
        .unwrap();
        p.add("b", Tensor::vector(vec![f32::MIN_POSITIVE, 2.0]))
            .unwrap();
        save(&stem, &p, serde_json::json!({"dim": 2})).unwrap();
        let (q, manifest) = load::<f32>(&stem).unwrap();
        assert_eq!(q.fingerprint(), p.fingerprint());
        assert_eq!(manifest.tensors[1].offset, 16);
        assert_eq!(manifest.meta["dim"], 2);
        assert!(load::<f64>(&stem).is_err());
    }
}
