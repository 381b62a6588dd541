//! Named parameter collections shared by the text encoder, the segmentation
//! model, the optimizer and the EMA teacher.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered map from parameter name to tensor. Iteration order is the sorted
/// name order, which makes checksums and serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::ParamMismatch(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::ParamMismatch(format!("missing parameter `{name}`")))
    }

    /// Overwrites an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape != tensor.shape {
            return Err(Error::Shape(format!(
                "`{name}`: expected {:?}, got {:?}",
                slot.shape, tensor.shape
            )));
        }
        *slot = tensor;
        Ok(())
    }

    /// Mutable access to two distinct entries at once.
    pub fn pair_mut(&mut self, a: &str, b: &str) -> Result<(&mut Tensor, &mut Tensor)> {
        let mut first = None;
        let mut second = None;
        for (k, v) in self.entries.iter_mut() {
            if k == a {
                first = Some(v);
            } else if k == b {
                second = Some(v);
            }
        }
        match (first, second) {
            (Some(x), Some(y)) => Ok((x, y)),
            _ => Err(Error::ParamMismatch(format!("missing `{a}` or `{b}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape.clone())))
                .collect(),
        }
    }

    /// Errors unless both sets have the same names with the same shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ParamMismatch(format!(
                "{} vs {} parameters",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(other.entries.iter()) {
            if ka != kb {
                return Err(Error::ParamMismatch(format!("`{ka}` vs `{kb}`")));
            }
            if va.shape != vb.shape {
                return Err(Error::ParamMismatch(format!(
                    "`{ka}`: {:?} vs {:?}",
                    va.shape, vb.shape
                )));
            }
        }
        Ok(())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Hex SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.entries {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((t.shape.len() as u64).to_le_bytes());
            for d in &t.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Subset of parameters whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlobDtype {
    F32,
    F64,
}

impl BlobDtype {
    pub fn name(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::InvalidInput(format!("unknown blob dtype `{other}`"))),
        }
    }

    pub fn encode(self, values: &[f64]) -> Vec<u8> {
        match self {
            Self::F32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
            Self::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn decode(self, bytes: &[u8]) -> Result<Vec<f64>> {
        let width = match self {
            Self::F32 => 4,
            Self::F64 => 8,
        };
        if bytes.len() % width != 0 {
            return Err(Error::Shape(format!("blob length {} not a multiple of {width}", bytes.len())));
        }
        Ok(bytes
            .chunks_exact(width)
            .map(|c| match self {
                Self::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Self::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect())
    }
}


/// Header of a saved parameter set: names and shapes in blob order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamIndex {
    dtype: String,
    entries: Vec<(String, Vec<usize>)>,
}

impl ParamSet {
    /// Writes `<stem>.json` (names, shapes, dtype) and `<stem>.bin`.
    pub fn save(&self, dir: &Path, stem: &str, dtype: BlobDtype) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let index = ParamIndex {
            dtype: dtype.name().into(),
            entries: self.entries.iter().map(|(k, t)| (k.clone(), t.shape.clone())).collect(),
        };
        let ip = dir.join(format!("{stem}.json"));
        fs::write(&ip, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&ip, e))?;
        let values: Vec<f64> = self.entries.values().flat_map(|t| t.data.iter().copied()).collect();
        let bp = dir.join(format!("{stem}.bin"));
        fs::write(&bp, dtype.encode(&values)).map_err(|e| Error::io(&bp, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let ip = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
        let index: ParamIndex = serde_json::from_str(&text)?;
        let bp = dir.join(format!("{stem}.bin"));
        let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        let values = BlobDtype::parse(&index.dtype)?.decode(&bytes)?;
        let expected: usize = index.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{} holds {} values, index implies {expected}",
                bp.display(),
                values.len()
            )));
        }
        let mut out = ParamSet::new();
        let mut offset = 0;
        for (name, shape) in index.entries {
            let n: usize = shape.iter().product();
            out.insert(name, Tensor::new(shape, values[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_round_trips_bit_exactly() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(vec![2, 2]));
        let t = Tensor::new(vec![2, 2], vec![0.1, -2.5e-300, f64::MIN_POSITIVE, 7.0]).unwrap();
        p.set("a", t.clone()).unwrap();
        assert_eq!(p.get("a").unwrap(), &t);
        assert!(p.set("a", Tensor::zeros(vec![4])).is_err());
        assert!(p.set("b", t).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(vec![3]));
        let before = p.checksum();
        assert_eq!(before, p.clone().checksum());
        p.get_mut("w").unwrap().data_mut()[1] = 1e-12;
        assert_ne!(before, p.checksum());
    }

    #[test]
    fn incompatible_sets_rejected() {
        let mut a = ParamSet::new();
        a.insert("x", Tensor::zeros(vec![2]));
        let mut b = ParamSet::new();
        b.insert("y", Tensor::zeros(vec![2]));
        assert!(a.add_scaled(&b, 1.0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.insert("b", Tensor::new(vec![3], vec![1.0 / 3.0, -0.0, 1e-310]).unwrap());
        p.insert("a", Tensor::new(vec![1, 2], vec![2.5, -7.0]).unwrap());
        p.save(dir.path(), "student", BlobDtype::F64).unwrap();
        assert_eq!(ParamSet::load(dir.path(), "student").unwrap().checksum(), p.checksum());
        p.save(dir.path(), "export", BlobDtype::F32).unwrap();
        let lossy = ParamSet::load(dir.path(), "export").unwrap();
        assert_eq!(lossy.get("a").unwrap().data(), &[2.5, -7.0]);
        assert!((lossy.get("b").unwrap().data()[0] - 1.0 / 3.0).abs() < 1e-7);
    }
}
