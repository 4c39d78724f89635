//! Named parameter storage, initialisation and the on-disk checkpoint archive.
//!
//! Archive layout (a directory):
//!
//! ```text
//! manifest.json   {"format": "plainmatte-archive/1", "buffer": "tensors.bin",
//!                  "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}...],
//!                  "metadata": {...}}
//! tensors.bin     raw little-endian values, tensors back to back
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MatteError, Result};
use crate::plane::SeededRng;
use crate::tensor::{DType, Real, Tensor};

pub const ARCHIVE_FORMAT: &str = "plainmatte-archive/1";
const MANIFEST: &str = "manifest.json";
const BUFFER: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// He initialisation scaled by fan-out (`shape[0] * prod(shape[2..])`).
    KaimingFanOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init, decay: true }
    }

    pub fn no_decay(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init, decay: false }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn sample<T: Real>(&self, rng: &mut SeededRng) -> Tensor<T> {
        let n = self.numel();
        let data: Vec<T> = match self.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal(std) => trunc_normal(rng, n, std),
            Init::KaimingFanOut => {
                let fan_out = self.shape[0] * self.shape[2..].iter().product::<usize>();
                trunc_normal(rng, n, (2.0 / fan_out as f64).sqrt())
            }
        };
        Tensor::new(self.shape.clone(), data).expect("spec shape")
    }
}

fn trunc_normal<T: Real>(rng: &mut SeededRng, n: usize, std: f64) -> Vec<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect()
}

/// Parameters keyed by their checkpoint names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    /// Draws every spec in order from `rng`.
    pub fn initialize(specs: &[ParamSpec], rng: &mut SeededRng) -> Self {
        let mut store = Self::new();
        for spec in specs {
            store.insert(&spec.name, spec.sample(rng));
        }
        store
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| MatteError::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| MatteError::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Checks that every spec is present with the declared shape.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(MatteError::ShapeMismatch(format!(
                    "{}: expected {:?}, found {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Adds uniform noise in `[-amp, amp]` to every value.
    pub fn perturb(&mut self, rng: &mut SeededRng, amp: f64) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += T::of(rng.gen_range(-amp..=amp)));
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    buffer: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Writes `stores` (all tensors, in order) plus `metadata` into `dir`.
pub fn save_archive<T: Real>(
    dir: &Path,
    stores: &[(&str, &ParamStore<T>)],
    metadata: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buffer: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (prefix, store) in stores {
        for (name, t) in store.iter() {
            let offset = buffer.len() as u64;
            for v in t.data() {
                match T::DTYPE {
                    DType::F32 => buffer.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                    DType::F64 => buffer.extend_from_slice(&v.f64().to_le_bytes()),
                }
            }
            entries.push(TensorEntry {
                name: format!("{prefix}{name}"),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset,
                nbytes: buffer.len() as u64 - offset,
            });
        }
    }
    let manifest =
        Manifest { format: ARCHIVE_FORMAT.into(), buffer: BUFFER.into(), tensors: entries, metadata };
    fs::write(dir.join(BUFFER), &buffer)?;
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads every tensor of an archive; names are returned unmodified.
pub fn load_archive<T: Real>(dir: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format != ARCHIVE_FORMAT {
        return Err(MatteError::Checkpoint(format!("unsupported format `{}`", manifest.format)));
    }
    let buffer = fs::read(dir.join(&manifest.buffer))?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        let size = e.dtype.size();
        if e.nbytes as usize != numel * size {
            return Err(MatteError::Checkpoint(format!("{}: byte length does not match shape", e.name)));
        }
        let start = e.offset as usize;
        let bytes = buffer
            .get(start..start + e.nbytes as usize)
            .ok_or_else(|| MatteError::Checkpoint(format!("{}: outside buffer", e.name)))?;
        let data: Vec<T> = match e.dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => {
                bytes.chunks_exact(8).map(|b| T::of(f64::from_le_bytes(b.try_into().unwrap()))).collect()
            }
        };
        store.insert(&e.name, Tensor::new(e.shape.clone(), data)?);
    }
    Ok((store, manifest.metadata))
}

/// Splits a loaded store by name prefix, stripping the prefix.
pub fn split_prefix<T: Real>(store: &ParamStore<T>, prefix: &str) -> ParamStore<T> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.insert(rest, t.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plane::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn missing_parameter_is_named() {
        let store = ParamStore::<f32>::new();
        match store.get("blocks.3.mlp.fc1.weight") {
            Err(MatteError::MissingParameter(n)) => assert_eq!(n, "blocks.3.mlp.fc1.weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn init_is_seeded() {
        let specs = vec![
            ParamSpec::weight("a", &[4, 3], Init::TruncNormal(0.02)),
            ParamSpec::weight("b", &[2, 3, 3, 3], Init::KaimingFanOut),
        ];
        let a = ParamStore::<f32>::initialize(&specs, &mut seeded_rng(3));
        let b = ParamStore::<f32>::initialize(&specs, &mut seeded_rng(3));
        assert_eq!(a, b);
        assert!(a.get("a").unwrap().data().iter().all(|v| v.abs() <= 0.04));
    }

    proptest! {
        #[test]
        fn archive_round_trips_bit_exactly(values in proptest::collection::vec(-1e30f32..1e30, 1..40)) {
            let dir = tempfile::tempdir().unwrap();
            let mut store = ParamStore::<f32>::new();
            let n = values.len();
            store.insert("x.weight", Tensor::new(vec![n], values.clone()).unwrap());
            store.insert("y", Tensor::new(vec![1, n], values.iter().map(|v| -v).collect()).unwrap());
            save_archive(dir.path(), &[("", &store)], serde_json::json!({"k": 1})).unwrap();
            let (back, meta) = load_archive::<f32>(dir.path()).unwrap();
            prop_assert_eq!(back, store);
            prop_assert_eq!(meta["k"].as_i64(), Some(1));
        }
    }
}
