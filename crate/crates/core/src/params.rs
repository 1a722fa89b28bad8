//! Named parameter tensors with seeded initialisation, checksums and
//! safetensors checkpoints carrying a JSON config header.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::emotion::Emotion;
use crate::error::{Error, Result};

/// Every model in this crate runs in double precision on the CPU.
pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

const CHECKPOINT_FORMAT: &str = "affedit-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;
const HEADER_KEY: &str = "affedit";

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// A flat collection of named variables.
///
/// Models built from a frozen store receive detached tensors, so no gradient
/// ever reaches them; the variables still share storage, so loading a
/// checkpoint after construction updates the model in place.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    trainable: bool,
}

impl ParamStore {
    pub fn new(seed: u64, trainable: bool) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed,
            trainable,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Variables in name order, for an optimizer.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in var.flatten_all()?.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Overwrites the value of an existing variable.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: have {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(DTYPE)?)?;
        Ok(())
    }

    pub fn save(&self, path: &Path, header: &CheckpointHeader) -> Result<()> {
        let mut header = header.clone();
        header.format = CHECKPOINT_FORMAT.to_string();
        header.version = CHECKPOINT_VERSION;
        let mut metadata = HashMap::new();
        metadata.insert(HEADER_KEY.to_string(), serde_json::to_string(&header)?);
        let tensors: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        safetensors::serialize_to_file(tensors, Some(metadata), path)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }

    /// Loads every parameter of this store from `path`; extra tensors in the
    /// file are an error, as are missing ones.
    pub fn load(&self, path: &Path) -> Result<CheckpointHeader> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Checkpoint(format!("reading {}: {e}", path.display()))
        })?;
        let header = read_header(&bytes, path)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &device())?;
        for name in tensors.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Checkpoint(format!(
                    "{} holds unexpected parameter `{name}`",
                    path.display()
                )));
            }
        }
        for name in self.vars.keys() {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("{} lacks parameter `{name}`", path.display()))
            })?;
            self.set(name, t)?;
        }
        Ok(header)
    }

    /// Copies values from another store with identical names and shapes.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in &other.vars {
            self.set(name, var.as_tensor())?;
        }
        Ok(())
    }
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            prefix: self.full_name(name),
            store: &mut *self.store,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Returns the named parameter, creating it on first use. Initial values
    /// depend only on the store seed and the full name.
    pub fn tensor<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let shape: Shape = shape.into();
        if let Some(var) = self.store.vars.get(&full) {
            if var.shape() != &shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{full}` re-requested with shape {shape:?}"
                )));
            }
            return Ok(self.view(var));
        }
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::seed_from_u64(self.store.seed ^ name_hash(&full));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * { let v: f64 = StandardNormal.sample(&mut rng); v })
                .collect(),
            Init::Uniform(bound) => {
                if bound == 0.0 {
                    vec![0.0; n]
                } else {
                    let dist = Uniform::new_inclusive(-bound, bound)
                        .map_err(|e| Error::invalid_config(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &device())?)?;
        let view = self.view(&var);
        self.store.vars.insert(full, var);
        Ok(view)
    }

    fn view(&self, var: &Var) -> Tensor {
        if self.store.trainable {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        }
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<candle_nn::Linear> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut b = self.sub(name);
        let w = b.tensor("weight", (outputs, inputs), Init::Uniform(bound))?;
        let bias = b.tensor("bias", outputs, Init::Uniform(bound))?;
        Ok(candle_nn::Linear::new(w, Some(bias)))
    }

    pub fn linear_no_bias(
        &mut self,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Result<candle_nn::Linear> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = self.sub(name).tensor("weight", (outputs, inputs), Init::Uniform(bound))?;
        Ok(candle_nn::Linear::new(w, None))
    }

    /// A linear layer whose weights and bias start at zero.
    pub fn linear_zeros(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<candle_nn::Linear> {
        let mut b = self.sub(name);
        let w = b.tensor("weight", (outputs, inputs), Init::Zeros)?;
        let bias = b.tensor("bias", outputs, Init::Zeros)?;
        Ok(candle_nn::Linear::new(w, Some(bias)))
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<candle_nn::Conv2d> {
        let bound = 1.0 / ((inputs * kernel * kernel) as f64).sqrt();
        let mut b = self.sub(name);
        let w = b.tensor("weight", (outputs, inputs, kernel, kernel), Init::Uniform(bound))?;
        let bias = b.tensor("bias", outputs, Init::Uniform(bound))?;
        let cfg = candle_nn::Conv2dConfig {
            padding,
            stride,
            ..Default::default()
        };
        Ok(candle_nn::Conv2d::new(w, Some(bias), cfg))
    }

    pub fn group_norm(&mut self, name: &str, groups: usize, channels: usize) -> Result<candle_nn::GroupNorm> {
        let mut b = self.sub(name);
        let w = b.tensor("weight", channels, Init::Ones)?;
        let bias = b.tensor("bias", channels, Init::Zeros)?;
        Ok(candle_nn::GroupNorm::new(w, bias, channels, groups, 1e-5)?)
    }

    pub fn layer_norm(&mut self, name: &str, channels: usize) -> Result<crate::nn::LayerNorm> {
        let mut b = self.sub(name);
        let w = b.tensor("weight", channels, Init::Ones)?;
        let bias = b.tensor("bias", channels, Init::Zeros)?;
        Ok(crate::nn::LayerNorm::new(w, bias, 1e-5))
    }
}

fn name_hash(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// JSON header stored in the safetensors metadata of every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    #[serde(default)]
    pub format: String,
    #[serde(default)]
    pub version: u32,
    /// What the tensors belong to, e.g. `spectrum-encoder`.
    pub kind: String,
    pub seed: u64,
    pub categories: Vec<String>,
    pub config: serde_json::Value,
}

impl CheckpointHeader {
    pub fn new(kind: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            seed,
            categories: Emotion::category_names(),
            config,
        }
    }
}

fn read_header(bytes: &[u8], path: &Path) -> Result<CheckpointHeader> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no config header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_str(raw)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{} is not an {CHECKPOINT_FORMAT} file",
            path.display()
        )));
    }
    if header.categories != Emotion::category_names() {
        return Err(Error::Checkpoint(format!(
            "{} was written with category order {:?}",
            path.display(),
            header.categories
        )));
    }
    Ok(header)
}

/// Reads only the header of a checkpoint file.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    read_header(&bytes, path)
}

/// `<dir>/<kind>-v<N>.safetensors` with N one past the highest existing.
pub fn next_version_path(dir: &Path, kind: &str) -> Result<PathBuf> {
    let next = existing_versions(dir, kind)?.last().map_or(1, |(v, _)| v + 1);
    Ok(dir.join(format!("{kind}-v{next}.safetensors")))
}

/// Highest-numbered checkpoint of `kind` in `dir`, if any.
pub fn latest_version_path(dir: &Path, kind: &str) -> Result<Option<PathBuf>> {
    Ok(existing_versions(dir, kind)?.pop().map(|(_, p)| p))
}

fn existing_versions(dir: &Path, kind: &str) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let prefix = format!("{kind}-v");
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(v) = name
            .strip_prefix(&prefix)
            .and_then(|rest| rest.strip_suffix(".safetensors"))
            .and_then(|n| n.parse::<u32>().ok())
        {
            out.push((v, path));
        }
    }
    out.sort();
    Ok(out)
}
