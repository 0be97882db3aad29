//! JSON manifest plus raw little-endian `f32` blob.
//!
//! ```json
//! {
//!   "blob": "toy.bin",
//!   "tensors": [
//!     {"name": "fc1.weight", "shape": [8, 16], "dtype": "f32",
//!      "byte_offset": 0, "byte_length": 512}
//!   ],
//!   "topology": {"layers": [
//!     {"name": "fc1", "weight": "fc1.weight", "input": "input", "activation": "relu"}
//!   ]}
//! }
//! ```
//!
//! `blob` is resolved relative to the manifest. Tensors are row-major and
//! may appear in any order, but must not overlap. A model layer's `input`
//! is either `"input"` (first layer) or the name of the preceding layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::permlearn::{Activation, Layer, Model};

/// Name of the calibration tensor.
pub const CALIBRATION_TENSOR: &str = "calibration";
/// Topology marker for the model input.
pub const MODEL_INPUT: &str = "input";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub weight: String,
    pub input: String,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<Topology>,
}

/// Named 2-D `f32` tensors with an optional layer topology.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    tensors: BTreeMap<String, Matrix<f32>>,
    order: Vec<String>,
    topology: Option<Topology>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, m: Matrix<f32>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Manifest(format!("duplicate tensor `{name}`")));
        }
        self.order.push(name.clone());
        self.tensors.insert(name, m);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<f32>> {
        self.tensors.get(name)
    }

    /// Tensor names in insertion (blob) order.
    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn topology(&self) -> Option<&Topology> {
        self.topology.as_ref()
    }

    pub fn set_topology(&mut self, topology: Topology) {
        self.topology = Some(topology);
    }

    pub fn from_model<T: Real>(model: &Model<T>) -> Result<Self> {
        let mut c = TensorContainer::new();
        let mut layers = Vec::new();
        let mut prev = MODEL_INPUT.to_string();
        for layer in model.layers() {
            let weight = format!("{}.weight", layer.name);
            c.insert(weight.clone(), layer.weight.cast())?;
            layers.push(LayerEntry {
                name: layer.name.clone(),
                weight,
                input: prev,
                activation: layer.activation,
            });
            prev = layer.name.clone();
        }
        c.set_topology(Topology { layers });
        Ok(c)
    }

    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        let topo = self
            .topology
            .as_ref()
            .ok_or_else(|| Error::Manifest("container has no model topology".into()))?;
        if topo.layers.is_empty() {
            return Err(Error::Manifest("topology lists no layers".into()));
        }
        let mut layers = Vec::with_capacity(topo.layers.len());
        let mut prev = MODEL_INPUT;
        for entry in &topo.layers {
            if entry.input != prev {
                return Err(Error::Manifest(format!(
                    "layer `{}` reads `{}`, expected `{prev}` (only chains are supported)",
                    entry.name, entry.input
                )));
            }
            let w = self
                .get(&entry.weight)
                .ok_or_else(|| Error::Manifest(format!("layer `{}` references missing tensor `{}`", entry.name, entry.weight)))?;
            layers.push(Layer::new(entry.name.clone(), w.cast(), entry.activation));
            prev = &entry.name;
        }
        Model::new(layers)
    }

    fn manifest(&self, blob: String) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .order
            .iter()
            .map(|name| {
                let m = &self.tensors[name];
                let len = (m.as_slice().len() * 4) as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    shape: vec![m.rows(), m.cols()],
                    dtype: "f32".into(),
                    byte_offset: offset,
                    byte_length: len,
                };
                offset += len;
                e
            })
            .collect();
        Manifest {
            blob,
            tensors,
            topology: self.topology.clone(),
        }
    }

    fn blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for name in &self.order {
            for v in self.tensors[name].as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes the manifest to `path` and the blob next to it (same stem,
    /// `.bin` extension). Returns the blob path.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let blob_path = path.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Manifest(format!("cannot derive a blob name from {}", path.display())))?
            .to_string();
        fs::write(&blob_path, self.blob())?;
        fs::write(path, serde_json::to_string_pretty(&self.manifest(blob_name))?)?;
        Ok(blob_path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let blob_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let blob = fs::read(&blob_path)?;
        Self::from_parts(manifest, &blob)
    }

    /// Validates `manifest` against `blob` and decodes every tensor.
    pub fn from_parts(manifest: Manifest, blob: &[u8]) -> Result<Self> {
        let mut extents: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            if t.dtype != "f32" {
                return Err(Error::Manifest(format!("tensor `{}` has unsupported dtype `{}`", t.name, t.dtype)));
            }
            let &[rows, cols] = t.shape.as_slice() else {
                return Err(Error::Manifest(format!("tensor `{}` must be 2-D, shape {:?}", t.name, t.shape)));
            };
            let elems = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::OffsetOverflow(t.name.clone()))?;
            if elems as u64 != t.byte_length || elems == 0 {
                return Err(Error::Manifest(format!(
                    "tensor `{}` of shape {:?} needs {elems} bytes, manifest says {}",
                    t.name, t.shape, t.byte_length
                )));
            }
            let end = t
                .byte_offset
                .checked_add(t.byte_length)
                .ok_or_else(|| Error::OffsetOverflow(t.name.clone()))?;
            extents.push((t.byte_offset, end, &t.name));
        }
        extents.sort_unstable();
        for w in extents.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::OverlappingTensors(w[0].2.to_string(), w[1].2.to_string()));
            }
        }
        if let Some(&(_, end, _)) = extents.iter().max_by_key(|e| e.1) {
            if end > blob.len() as u64 {
                return Err(Error::BlobTruncated {
                    needed: end,
                    actual: blob.len() as u64,
                });
            }
        }

        let mut c = TensorContainer::new();
        for t in &manifest.tensors {
            let bytes = &blob[t.byte_offset as usize..(t.byte_offset + t.byte_length) as usize];
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let m = Matrix::new(t.shape[0], t.shape[1], data)
                .map_err(|e| Error::Manifest(format!("tensor `{}`: {e}", t.name)))?;
            c.insert(t.name.clone(), m)?;
        }
        c.topology = manifest.topology;
        if c.topology.is_some() {
            c.to_model::<f32>()?;
        }
        Ok(c)
    }
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    TensorContainer::load(path)?.to_model()
}

pub fn load_calibration<T: Real>(path: impl AsRef<Path>) -> Result<Matrix<T>> {
    let c = TensorContainer::load(path)?;
    c.get(CALIBRATION_TENSOR)
        .map(|m| m.cast())
        .ok_or_else(|| Error::Manifest(format!("no `{CALIBRATION_TENSOR}` tensor")))
}

pub fn save_model<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<PathBuf> {
    TensorContainer::from_model(model)?.save(path)
}

pub fn save_calibration<T: Real>(x: &Matrix<T>, path: impl AsRef<Path>) -> Result<PathBuf> {
    let mut c = TensorContainer::new();
    c.insert(CALIBRATION_TENSOR, x.cast())?;
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn toy() -> Model<f32> {
        let mut rng = Rng::new(0);
        Model::new(vec![
            Layer::new("fc1", rng.gaussian_matrix(8, 16, 1.0), Activation::Relu),
            Layer::new("fc2", rng.gaussian_matrix(4, 8, 1.0), Activation::Identity),
        ])
        .unwrap()
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        let model = toy();
        save_model(&model, &path).unwrap();
        let back: Model<f32> = load_model(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.layers()[1].c_in(), back.layers()[0].c_out());
    }

    #[test]
    fn truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        let blob = save_model(&toy(), &path).unwrap();
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        let err = TensorContainer::load(&path).unwrap_err();
        assert!(matches!(err, Error::BlobTruncated { .. }));
        assert!(err.to_string().contains("blob shorter than manifest extent"));
    }

    #[test]
    fn distinct_manifest_errors() {
        let c = TensorContainer::from_model(&toy()).unwrap();
        let blob = c.blob();
        let good = c.manifest("x.bin".into());

        let mut m = good.clone();
        m.tensors[1].byte_offset = 4;
        assert!(matches!(TensorContainer::from_parts(m, &blob), Err(Error::OverlappingTensors(..))));

        let mut m = good.clone();
        m.tensors[0].byte_offset = u64::MAX - 2;
        assert!(matches!(TensorContainer::from_parts(m, &blob), Err(Error::OffsetOverflow(_))));

        let mut m = good.clone();
        m.tensors[0].shape = vec![8, 15];
        assert!(matches!(TensorContainer::from_parts(m, &blob), Err(Error::Manifest(_))));

        let mut m = good.clone();
        m.topology.as_mut().unwrap().layers[1].input = "input".into();
        assert!(matches!(TensorContainer::from_parts(m, &blob), Err(Error::Manifest(_))));

        let mut m = good;
        m.tensors[0].dtype = "f16".into();
        assert!(matches!(TensorContainer::from_parts(m, &blob), Err(Error::Manifest(_))));
    }

    #[test]
    fn calibration_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.json");
        let x = Rng::new(3).gaussian_matrix::<f32>(128, 16, 1.0);
        save_calibration(&x, &path).unwrap();
        assert_eq!(load_calibration::<f32>(&path).unwrap(), x);
        assert!(load_model::<f32>(&path).is_err());
    }
}
