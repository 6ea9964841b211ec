//! On-disk checkpoints: `manifest.json` plus `weights.bin`.
//!
//! The blob is the concatenation of little-endian tensors in manifest order:
//! each parametric layer's weights then bias, followed by optimizer moments
//! (`m`, `v` per tensor) when the optimizer keeps any.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network};
use crate::optim::{Moments, Optimizer, OptimizerSpec};
use crate::rng::RngState;
use crate::tensor::{DType, Scalar, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Baseline,
    Prune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Prune => "prune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub spec: OptimizerSpec,
    pub t: u64,
}

/// Everything needed to continue a phase exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    /// Shuffle order of epoch `e` is derived from the run seed and `e`.
    pub next_epoch: usize,
    pub gate: Vec<(String, RngState)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub architecture: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub dtype: DType,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
    pub step_counter: u64,
    pub config_hash: String,
    pub phase: Phase,
    /// Completed epochs of `phase`.
    pub epoch: usize,
    pub seed: u64,
    pub optimizer: OptimizerState,
    pub rng: RngRecord,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub manifest: Manifest,
    pub net: Network<T>,
    pub moments: Vec<Moments<T>>,
}

/// Fields of a manifest that are not derived from the tensors.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub architecture: String,
    pub config_hash: String,
    pub phase: Phase,
    pub epoch: usize,
    pub seed: u64,
    pub gate: Vec<(String, RngState)>,
    pub metrics: BTreeMap<String, f64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(net: &Network<T>, optimizer: &Optimizer<T>, meta: CheckpointMeta) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: &[usize]| {
            tensors.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                offset,
            });
            offset += shape.iter().product::<usize>() * T::DTYPE.size_of();
        };
        for p in net.params() {
            push(format!("{}.weight", p.layer_id), p.weights.shape());
            push(format!("{}.bias", p.layer_id), p.bias.shape());
        }
        let names: Vec<String> = net
            .params()
            .iter()
            .flat_map(|p| [format!("{}.weight", p.layer_id), format!("{}.bias", p.layer_id)])
            .collect();
        for (name, m) in names.iter().zip(optimizer.moments()) {
            push(format!("adam.m.{name}"), m.m.shape());
            push(format!("adam.v.{name}"), m.v.shape());
        }
        let manifest = Manifest {
            format: FORMAT_VERSION,
            architecture: meta.architecture,
            input_shape: net.input_shape().to_vec(),
            layers: net.specs(),
            dtype: T::DTYPE,
            tensors,
            blob_bytes: offset,
            step_counter: net.step_counter,
            config_hash: meta.config_hash,
            phase: meta.phase,
            epoch: meta.epoch,
            seed: meta.seed,
            optimizer: OptimizerState {
                spec: optimizer.spec,
                t: optimizer.t,
            },
            rng: RngRecord {
                next_epoch: meta.epoch + 1,
                gate: meta.gate,
            },
            metrics: meta.metrics,
        };
        Checkpoint {
            manifest,
            net: net.clone(),
            moments: optimizer.moments().to_vec(),
        }
    }

    /// Optimizer with the saved spec, step count and moments.
    pub fn optimizer(&self) -> Result<Optimizer<T>> {
        let mut opt = Optimizer::new(self.manifest.optimizer.spec, &self.net);
        opt.restore(self.manifest.optimizer.t, self.moments.clone())?;
        Ok(opt)
    }

    fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.manifest.blob_bytes);
        for p in self.net.params() {
            p.weights.write_le_bytes(&mut out);
            p.bias.write_le_bytes(&mut out);
        }
        for m in &self.moments {
            m.m.write_le_bytes(&mut out);
            m.v.write_le_bytes(&mut out);
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        json.push('\n');
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let wpath = dir.join(WEIGHTS);
        fs::write(&wpath, self.blob()).map_err(|e| Error::io(&wpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let wpath = dir.join(WEIGHTS);
        if manifest.dtype != T::DTYPE {
            return Err(Error::format(
                dir.join(MANIFEST),
                format!("checkpoint holds {} tensors, expected {}", manifest.dtype, T::DTYPE),
            ));
        }
        let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        if blob.len() != manifest.blob_bytes {
            return Err(Error::format(
                &wpath,
                format!("{} bytes, manifest says {}", blob.len(), manifest.blob_bytes),
            ));
        }
        let mut net = Network::<T>::build(&manifest.input_shape, &manifest.layers)?;
        net.step_counter = manifest.step_counter;
        let width = T::DTYPE.size_of();
        let mut entries = manifest.tensors.iter();
        let mut next = |expect: String, shape: &[usize]| -> Result<Tensor<T>> {
            let e = entries
                .next()
                .ok_or_else(|| Error::format(&wpath, format!("missing tensor `{expect}`")))?;
            if e.name != expect || e.shape != shape {
                return Err(Error::format(
                    &wpath,
                    format!("tensor `{}` {:?} where `{expect}` {shape:?} was expected", e.name, e.shape),
                ));
            }
            let len = shape.iter().product::<usize>() * width;
            let bytes = blob
                .get(e.offset..e.offset + len)
                .ok_or_else(|| Error::format(&wpath, format!("tensor `{expect}` runs past the blob")))?;
            Tensor::from_le_bytes(shape.to_vec(), bytes)
        };
        let mut names = Vec::new();
        for p in net.params_mut() {
            let (w, b) = (format!("{}.weight", p.layer_id), format!("{}.bias", p.layer_id));
            p.weights = next(w.clone(), &p.weights.shape().to_vec())?;
            p.bias = next(b.clone(), &p.bias.shape().to_vec())?;
            names.push((w, p.weights.shape().to_vec()));
            names.push((b, p.bias.shape().to_vec()));
        }
        let mut moments = Vec::new();
        if manifest.tensors.len() > names.len() {
            for (name, shape) in &names {
                let m = next(format!("adam.m.{name}"), shape)?;
                let v = next(format!("adam.v.{name}"), shape)?;
                moments.push(Moments { m, v });
            }
        }
        if entries.next().is_some() {
            return Err(Error::format(&wpath, "unexpected trailing tensors"));
        }
        let ckpt = Checkpoint { manifest, net, moments };
        ckpt.optimizer()?;
        Ok(ckpt)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::format(&path, format!("unsupported format {}", manifest.format)));
    }
    Ok(manifest)
}
