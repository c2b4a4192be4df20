//! Tar archive holding `manifest.json` and one little-endian array file per
//! parameter: `u32` rank, `u64` dims, `f64` data.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::harness::HarnessError;
use crate::numcore::{ParamStore, Tensor};
use crate::scalar::Real;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// `autoencoder` or `diffusion`.
    pub kind: String,
    pub config: serde_json::Value,
    pub modules: BTreeMap<String, String>,
    pub arrays: Vec<ArrayEntry>,
    /// Kind-specific metadata.
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub arrays: Vec<(String, Tensor<f64>)>,
}

fn array_path(name: &str) -> String {
    format!("arrays/{name}.bin")
}

fn encode_array(t: &Tensor<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_array(name: &str, bytes: &[u8]) -> Result<Tensor<f64>, HarnessError> {
    let bad = || HarnessError::Checkpoint(format!("array {name} is truncated"));
    let rank = u32::from_le_bytes(bytes.get(..4).ok_or_else(bad)?.try_into().unwrap()) as usize;
    let mut pos = 4;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(bytes.get(pos..pos + 8).ok_or_else(bad)?.try_into().unwrap());
        shape.push(d as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    if bytes.len() != pos + 8 * n {
        return Err(bad());
    }
    let data = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(&shape, data))
}

impl Checkpoint {
    pub fn new<T: Real>(kind: &str, config: serde_json::Value, store: &ParamStore<T>, extra: serde_json::Value) -> Self {
        let arrays: Vec<(String, Tensor<f64>)> = store.iter().map(|(n, p)| (n.to_string(), p.value.cast())).collect();
        let mut modules = BTreeMap::new();
        modules.insert("alignmol".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                config,
                modules,
                arrays: arrays
                    .iter()
                    .map(|(n, t)| ArrayEntry {
                        name: n.clone(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
                extra,
            },
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, HarnessError> {
        let mut b = tar::Builder::new(Vec::new());
        let mut add = |path: &str, data: &[u8]| -> std::io::Result<()> {
            let mut h = tar::Header::new_gnu();
            h.set_size(data.len() as u64);
            h.set_mode(0o644);
            h.set_mtime(0);
            h.set_uid(0);
            h.set_gid(0);
            h.set_entry_type(tar::EntryType::Regular);
            b.append_data(&mut h, path, data)
        };
        add("manifest.json", &serde_json::to_vec_pretty(&self.manifest)?)?;
        for (name, t) in &self.arrays {
            add(&array_path(name), &encode_array(t))?;
        }
        Ok(b.into_inner()?)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| HarnessError::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let mut files = BTreeMap::new();
        let mut archive = tar::Archive::new(bytes);
        for entry in archive.entries()? {
            let mut e = entry?;
            let path = e.path()?.to_string_lossy().into_owned();
            let mut data = Vec::new();
            e.read_to_end(&mut data)?;
            files.insert(path, data);
        }
        let manifest: Manifest = serde_json::from_slice(
            files
                .get("manifest.json")
                .ok_or_else(|| HarnessError::Checkpoint("missing manifest.json".into()))?,
        )?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(HarnessError::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for a in &manifest.arrays {
            let bytes = files
                .get(&array_path(&a.name))
                .ok_or_else(|| HarnessError::Checkpoint(format!("array {} listed but absent", a.name)))?;
            let t = decode_array(&a.name, bytes)?;
            if t.shape() != a.shape.as_slice() {
                return Err(HarnessError::Checkpoint(format!(
                    "array {}: manifest shape {:?}, stored {:?}",
                    a.name,
                    a.shape,
                    t.shape()
                )));
            }
            arrays.push((a.name.clone(), t));
        }
        Ok(Self { manifest, arrays })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copy every array into the same-named parameter of `store`.
    pub fn restore<T: Real>(&self, store: &mut ParamStore<T>) -> Result<(), HarnessError> {
        if self.arrays.len() != store.len() {
            return Err(HarnessError::Checkpoint(format!(
                "checkpoint has {} arrays, model has {} parameters",
                self.arrays.len(),
                store.len()
            )));
        }
        for (name, t) in &self.arrays {
            store
                .load(name, t.cast())
                .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    /// Hash of all array bits, used to pair a diffusion model with its autoencoder.
    pub fn fingerprint(&self) -> String {
        let mut h = DefaultHasher::new();
        for (n, t) in &self.arrays {
            n.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        format!("{:016x}", h.finish())
    }
}
