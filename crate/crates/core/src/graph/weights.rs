//! Keyed parameter storage and the `LDW0` file format:
//! magic, u32 manifest length, JSON manifest, f32 LE blob, u32 CRC-32 of the blob.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ModelGraph, Rng};
use crate::blocks::ConvSpec;
use crate::error::{Error, Result};
use crate::tensor::ConvParams;

const MAGIC: &[u8; 4] = b"LDW0";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    blob_len: usize,
    entries: IndexMap<String, WeightEntry>,
}

/// Flat blob of parameters with a manifest. Entries are contiguous in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: IndexMap<String, WeightEntry>,
    blob: Vec<f32>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let length: usize = shape.iter().product();
        if length != data.len() {
            return Err(Error::Shape(format!(
                "weight `{key}` has shape {shape:?} but {} values",
                data.len()
            )));
        }
        if self.entries.contains_key(key) {
            return Err(Error::Config(format!("duplicate weight `{key}`")));
        }
        let offset = self.blob.len();
        self.blob.extend(data);
        self.entries.insert(key.to_string(), WeightEntry { shape, offset, length });
        Ok(())
    }

    pub fn entries(&self) -> &IndexMap<String, WeightEntry> {
        &self.entries
    }

    pub fn blob(&self) -> &[f32] {
        &self.blob
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.entries.get(key).map(|e| &self.blob[e.offset..e.offset + e.length])
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut [f32]> {
        let e = self.entries.get(key)?;
        Some(&mut self.blob[e.offset..e.offset + e.length])
    }

    pub fn shape(&self, key: &str) -> Option<&[usize]> {
        self.entries.get(key).map(|e| e.shape.as_slice())
    }

    fn require(&self, key: &str) -> Result<&[f32]> {
        self.get(key).ok_or_else(|| Error::MissingWeight(key.to_string()))
    }

    fn blob_bytes(&self) -> Vec<u8> {
        self.blob.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// CRC-32 of the little-endian blob.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.blob_bytes())
    }

    /// Conv parameters for `name`, shaped by `spec`.
    pub fn conv(&self, name: &str, spec: &ConvSpec) -> Result<ConvParams> {
        let wk = format!("{name}.weight");
        let bk = format!("{name}.bias");
        let w = self.require(&wk)?;
        let b = self.require(&bk)?;
        if self.shape(&wk) != Some(&spec.weight_shape()[..]) || b.len() != spec.c_out {
            return Err(Error::Config(format!(
                "weights for `{name}` have shape {:?}, graph declares {:?}",
                self.shape(&wk).unwrap_or_default(),
                spec.weight_shape()
            )));
        }
        spec.params_from(w.to_vec(), b.to_vec())
    }

    /// Errors unless the keys are exactly those `g` declares.
    pub fn check_covers(&self, g: &ModelGraph) -> Result<()> {
        let keys = g.param_keys();
        for k in &keys {
            if !self.contains(k) {
                return Err(Error::MissingWeight(k.clone()));
            }
        }
        if keys.len() != self.len() {
            let declared: std::collections::HashSet<&String> = keys.iter().collect();
            let extra = self.entries.keys().find(|k| !declared.contains(k));
            return Err(Error::Config(format!(
                "weight `{}` is not declared by the graph",
                extra.map_or("?", |s| s.as_str())
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&Manifest {
            blob_len: self.blob.len(),
            entries: self.entries.clone(),
        })
        .expect("manifest serializes");
        let blob = self.blob_bytes();
        let mut out = Vec::with_capacity(12 + manifest.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blob);
        out.extend_from_slice(&crc32fast::hash(&blob).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(format!("weights file: {m}"));
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic or truncated header"));
        }
        let mlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let rest = &bytes[8..];
        if rest.len() < mlen {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&rest[..mlen]).map_err(|e| corrupt(&format!("manifest: {e}")))?;
        let rest = &rest[mlen..];
        if rest.len() != manifest.blob_len * 4 + 4 {
            return Err(corrupt(&format!(
                "expected {} blob bytes plus checksum, found {}",
                manifest.blob_len * 4,
                rest.len()
            )));
        }
        let (blob_bytes, crc) = rest.split_at(manifest.blob_len * 4);
        let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
        if crc32fast::hash(blob_bytes) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut next = 0;
        for (k, e) in &manifest.entries {
            if e.offset != next || e.length != e.shape.iter().product::<usize>() {
                return Err(corrupt(&format!("entry `{k}` overlaps or has inconsistent length")));
            }
            next += e.length;
        }
        if next != manifest.blob_len {
            return Err(corrupt("entries do not cover the blob"));
        }
        let blob = blob_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(WeightStore {
            entries: manifest.entries,
            blob,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero, drawn from one stream
/// in [`ModelGraph::convs`] order.
pub fn init_weights(g: &ModelGraph, seed: u64) -> WeightStore {
    let mut rng = Rng::new(seed);
    let mut w = WeightStore::new();
    for c in g.convs() {
        let bound = 1.0 / (c.spec.fan_in() as f64).sqrt();
        let data = (0..c.spec.weight_len()).map(|_| rng.uniform(-bound, bound) as f32).collect();
        w.insert(&c.weight_key(), c.spec.weight_shape().to_vec(), data)
            .expect("graph conv names are unique");
        w.insert(&c.bias_key(), vec![c.spec.c_out], vec![0.0; c.spec.c_out])
            .expect("graph conv names are unique");
    }
    w
}
