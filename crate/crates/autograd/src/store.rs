//! Named parameter collections and their on-disk checkpoint form.
//!
//! A checkpoint is a directory holding `manifest.json` (names, kinds,
//! shapes, dtype, byte offsets, creation seed and caller metadata) and one
//! raw little-endian data file with every tensor concatenated in manifest
//! order.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "xsynth-params-v1";

/// Role of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// Trained by gradient descent.
    Param,
    /// Updated outside gradient descent (running statistics).
    Buffer,
    /// Optimizer state.
    State,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    kind: EntryKind,
    value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    seed: u64,
    entries: BTreeMap<String, Entry<T>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    seed: u64,
    data_file: String,
    total_bytes: u64,
    entries: Vec<ManifestEntry>,
    extra: serde_json::Value,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, kind: EntryKind, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Shape(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name.to_string(), Entry { kind, value });
        Ok(())
    }

    /// Replaces the value of an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter `{name}`")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{name}` has shape {:?}, new value {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn kind(&self, name: &str) -> Option<EntryKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.remove(name).map(|e| e.value)
    }

    /// All entries in canonical (sorted) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, EntryKind, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e.kind, &e.value))
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .keys()
            .filter(move |k| k.starts_with(prefix))
            .map(String::as_str)
    }

    /// Number of scalars in trainable entries.
    pub fn param_count(&self) -> usize {
        self.iter()
            .filter(|(_, k, _)| *k == EntryKind::Param)
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            kind: e.kind,
                            value: e.value.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Order-sensitive hash of names and value bits of entries under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut buf = Vec::new();
        for (name, e) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.write(name.as_bytes());
            buf.clear();
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
            h.write(&buf);
        }
        h.finish()
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let data_file = format!("params.{}", T::DTYPE);
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, e) in &self.entries {
            let offset = data.len() as u64;
            for &v in e.value.data() {
                v.write_le(&mut data);
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                kind: e.kind,
                shape: e.value.shape().to_vec(),
                offset,
                bytes: data.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            dtype: T::DTYPE.into(),
            seed: self.seed,
            data_file: data_file.clone(),
            total_bytes: data.len() as u64,
            entries,
            extra,
        };
        fs::write(dir.join(&data_file), &data)?;
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    /// Loads a checkpoint directory, converting from the stored dtype.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let fail = |msg: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            msg,
        };
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != FORMAT {
            return Err(fail(format!("unknown format `{}`", manifest.format)));
        }
        let width = match manifest.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(fail(format!("unsupported dtype `{other}`"))),
        };
        let data = fs::read(dir.join(&manifest.data_file))?;
        if data.len() as u64 != manifest.total_bytes {
            return Err(fail(format!(
                "data file holds {} bytes, manifest says {}",
                data.len(),
                manifest.total_bytes
            )));
        }
        let mut store = Self::new(manifest.seed);
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            if e.bytes != (n * width) as u64 || e.offset + e.bytes > data.len() as u64 {
                return Err(fail(format!("entry `{}` has inconsistent extent", e.name)));
            }
            let raw = &data[e.offset as usize..(e.offset + e.bytes) as usize];
            let values: Vec<T> = raw
                .chunks_exact(width)
                .map(|c| {
                    if width == 4 {
                        T::c(f32::read_le(c) as f64)
                    } else {
                        T::c(f64::read_le(c))
                    }
                })
                .collect();
            let t = Tensor::new(&e.shape, values).map_err(|err| fail(err.to_string()))?;
            store.insert(&e.name, e.kind, t).map_err(|err| fail(err.to_string()))?;
        }
        Ok((store, manifest.extra))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new(11);
        s.insert("b.w", EntryKind::Param, Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2))
            .unwrap();
        s.insert("a.bn.mean", EntryKind::Buffer, Tensor::ones(&[4])).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample();
        assert!(s.insert("b.w", EntryKind::Param, Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (d1, d2) = (dir.path().join("one"), dir.path().join("two"));
        let s = sample();
        s.save(&d1, serde_json::json!({"step": 3})).unwrap();
        let (loaded, extra) = ParamStore::<f32>::load(&d1).unwrap();
        assert_eq!(loaded, s);
        loaded.save(&d2, extra).unwrap();
        for f in [MANIFEST_FILE, "params.f32"] {
            assert_eq!(fs::read(d1.join(f)).unwrap(), fs::read(d2.join(f)).unwrap());
        }
    }

    #[test]
    fn truncated_data_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path(), serde_json::Value::Null).unwrap();
        let p = dir.path().join("params.f32");
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(ParamStore::<f32>::load(dir.path()).is_err());
    }
}
