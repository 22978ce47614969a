//! Named, seeded trainable parameters and the checkpoint container.
//!
//! Weights are drawn from a ChaCha stream rather than candle's global RNG so
//! that initialization is reproducible. Checkpoints are safetensors files
//! whose string metadata carries the model kind, its JSON config, the
//! training step and lineage fields.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use forge_core::seed::rng_from;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use safetensors::tensor::{Dtype, TensorView};
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ParamsError {
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("parameter {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("checkpoint has unexpected parameter {0}")]
    Unexpected(String),
    #[error("checkpoint kind is {found:?}, expected {expected:?}")]
    WrongKind { expected: String, found: String },
    #[error("{0} has not been trained")]
    Untrained(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
}

pub struct ParamStore {
    names: Vec<String>,
    vars: Vec<Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), vars: Vec::new(), rng: rng_from(seed), device: Device::Cpu }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a new parameter; names must be unique.
    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> candle_core::Result<Tensor> {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| (self.rng.sample::<f64, _>(StandardNormal) * std) as f32).collect(),
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.names.push(name.to_string());
        self.vars.push(var);
        Ok(t)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.clone()
    }

    /// Vars whose names start with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.names.iter().zip(&self.vars).filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v.clone()).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_params(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian f32 values, in registration order.
    pub fn digest(&self) -> candle_core::Result<String> {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.vars) {
            h.update(n.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<(), ParamsError> {
        let err = |m: String| ParamsError::Checkpoint { path: path.display().to_string(), message: m };
        let mut bytes: Vec<(String, Vec<u8>, Vec<usize>)> = Vec::with_capacity(self.vars.len());
        for (n, v) in self.names.iter().zip(&self.vars) {
            let vals = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let b: Vec<u8> = vals.iter().flat_map(|x| x.to_le_bytes()).collect();
            bytes.push((n.clone(), b, v.dims().to_vec()));
        }
        let views: Vec<(String, TensorView<'_>)> = bytes
            .iter()
            .map(|(n, b, s)| TensorView::new(Dtype::F32, s.clone(), b).map(|v| (n.clone(), v)))
            .collect::<Result<_, _>>()
            .map_err(|e| err(e.to_string()))?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
            }
        }
        let tmp = path.with_extension("partial");
        safetensors::serialize_to_file(views, Some(meta.to_map()), &tmp).map_err(|e| err(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| err(e.to_string()))?;
        Ok(())
    }

    /// Overwrites every registered parameter from a checkpoint; names and
    /// shapes must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<CheckpointMeta, ParamsError> {
        let (meta, tensors) = read_checkpoint(path)?;
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = tensors.into_iter().collect();
        for (n, v) in self.names.iter().zip(&self.vars) {
            let (shape, data) = tensors.remove(n).ok_or_else(|| ParamsError::Missing(n.clone()))?;
            if shape != v.dims() {
                return Err(ParamsError::ShapeMismatch { name: n.clone(), expected: v.dims().to_vec(), found: shape });
            }
            v.set(&Tensor::from_vec(data, shape, &self.device)?)?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ParamsError::Unexpected(extra.clone()));
        }
        Ok(meta)
    }
}

type RawTensors = Vec<(String, (Vec<usize>, Vec<f32>))>;

fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, RawTensors), ParamsError> {
    let err = |m: String| ParamsError::Checkpoint { path: path.display().to_string(), message: m };
    let buf = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    let st = safetensors::SafeTensors::deserialize(&buf).map_err(|e| err(e.to_string()))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&buf).map_err(|e| err(e.to_string()))?;
    let meta = CheckpointMeta::from_map(header.metadata().clone().unwrap_or_default()).map_err(err)?;
    let mut out = Vec::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(err(format!("tensor {name} is {:?}, expected F32", view.dtype())));
        }
        let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, (view.shape().to_vec(), data)));
    }
    Ok((meta, out))
}

/// Reads only the metadata of a checkpoint.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta, ParamsError> {
    read_checkpoint(path).map(|(m, _)| m)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub kind: String,
    /// JSON of the model config.
    pub config: String,
    pub step: u64,
    pub id: String,
    pub material: Option<String>,
    pub parent: Option<String>,
}

impl CheckpointMeta {
    pub fn new<C: Serialize>(kind: &str, config: &C, step: u64) -> Self {
        Self {
            kind: kind.into(),
            config: serde_json::to_string(config).expect("config serializes"),
            step,
            ..Default::default()
        }
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C, ParamsError> {
        serde_json::from_str(&self.config)
            .map_err(|e| ParamsError::Checkpoint { path: self.kind.clone(), message: format!("bad config: {e}") })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ParamsError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(ParamsError::WrongKind { expected: kind.into(), found: self.kind.clone() })
        }
    }

    fn to_map(&self) -> HashMap<String, String> {
        let mut m = HashMap::new();
        m.insert("kind".into(), self.kind.clone());
        m.insert("config".into(), self.config.clone());
        m.insert("step".into(), self.step.to_string());
        m.insert("id".into(), self.id.clone());
        if let Some(v) = &self.material {
            m.insert("material".into(), v.clone());
        }
        if let Some(v) = &self.parent {
            m.insert("parent".into(), v.clone());
        }
        m
    }

    fn from_map(mut m: HashMap<String, String>) -> Result<Self, String> {
        let kind = m.remove("kind").ok_or("metadata lacks `kind`")?;
        let config = m.remove("config").ok_or("metadata lacks `config`")?;
        let step = m.remove("step").unwrap_or_default().parse().unwrap_or(0);
        Ok(Self {
            kind,
            config,
            step,
            id: m.remove("id").unwrap_or_default(),
            material: m.remove("material"),
            parent: m.remove("parent"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut a = ParamStore::new(1);
        a.var("w", &[3, 2], Init::Normal(1.0)).unwrap();
        a.var("b", &[2], Init::Zeros).unwrap();
        let mut meta = CheckpointMeta::new("toy", &serde_json::json!({"k": 1}), 7);
        meta.parent = Some("root".into());
        a.save(&path, &meta).unwrap();

        let mut b = ParamStore::new(2);
        b.var("w", &[3, 2], Init::Normal(1.0)).unwrap();
        b.var("b", &[2], Init::Ones).unwrap();
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        let got = b.load(&path).unwrap();
        assert_eq!(got, meta);
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());

        let mut c = ParamStore::new(3);
        c.var("w", &[2, 3], Init::Zeros).unwrap();
        c.var("b", &[2], Init::Zeros).unwrap();
        assert!(matches!(c.load(&path), Err(ParamsError::ShapeMismatch { .. })));
    }

    #[test]
    fn same_seed_same_weights() {
        let mk = |s| {
            let mut p = ParamStore::new(s);
            p.var("w", &[4, 4], Init::Normal(0.5)).unwrap();
            p.digest().unwrap()
        };
        assert_eq!(mk(5), mk(5));
        assert_ne!(mk(5), mk(6));
    }
}
