//! Experiment configuration, parsed from TOML. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::nn::{self, LayerSpec, Network};
use crate::optim::{OptimizerSpec, RegKind, RegSpec};
use crate::prune::GateSpec;
use crate::tensor::{DType, Scalar};

/// Epochs used when a phase does not set them.
pub const DESK_EPOCHS: (usize, usize) = (50, 100);
pub const PAPER_EPOCHS: (usize, usize) = (200, 200);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    #[default]
    #[serde(rename = "mlp-300-100")]
    Mlp300100,
    LenetSmall,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub dtype: DType,
    /// Custom architectures only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
}

impl ModelConfig {
    pub fn layout(&self) -> Result<(Vec<usize>, Vec<LayerSpec>)> {
        match (self.architecture, &self.input_shape, &self.layers) {
            (Architecture::Mlp300100, None, None) => Ok(nn::mlp_300_100()),
            (Architecture::LenetSmall, None, None) => Ok(nn::lenet_small()),
            (Architecture::Custom, Some(shape), Some(layers)) => Ok((shape.clone(), layers.clone())),
            (Architecture::Custom, _, _) => Err(Error::Config(
                "custom architecture needs model.input_shape and model.layers".into(),
            )),
            _ => Err(Error::Config(
                "model.input_shape and model.layers are only allowed with architecture = \"custom\"".into(),
            )),
        }
    }

    pub fn build<T: Scalar>(&self) -> Result<Network<T>> {
        let (shape, layers) = self.layout()?;
        Network::build(&shape, &layers)
    }
}

/// Penalty as written in a config: one `lambda`, or explicit `lambda1`/`lambda2` for elastic net.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    #[serde(default)]
    pub kind: RegKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
}

impl RegConfig {
    pub fn new(kind: RegKind, lambda: f64) -> Self {
        RegConfig {
            kind,
            lambda: (kind != RegKind::None).then_some(lambda),
            lambda1: None,
            lambda2: None,
        }
    }

    pub fn spec(&self) -> Result<RegSpec> {
        match (self.kind, self.lambda, self.lambda1, self.lambda2) {
            (RegKind::None, None, None, None) => Ok(RegSpec::none()),
            (RegKind::Elastic, None, Some(l1), Some(l2)) => Ok(RegSpec::elastic_split(l1, l2)),
            (kind, Some(l), None, None) if kind != RegKind::None => Ok(RegSpec::from_kind(kind, l)),
            _ => Err(Error::Config(format!(
                "{:?} regularization takes `lambda` (or `lambda1` and `lambda2` for elastic)",
                self.kind
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub reg: RegConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub reg: RegConfig,
    /// Required before a prune phase can start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateSpec>,
    /// Start the prune phase with zeroed optimizer state.
    #[serde(default = "yes")]
    pub reset_optimizer: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            epochs: None,
            reg: RegConfig::default(),
            gate: None,
            reset_optimizer: true,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Save an intermediate checkpoint every this many epochs; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "yes")]
    pub deterministic: bool,
    /// Also log the pruned-weight fraction after every minibatch.
    #[serde(default)]
    pub dense_logging: bool,
    #[serde(default)]
    pub scale: Scale,
    /// Samples per forward pass during evaluation.
    #[serde(default = "default_eval_chunk")]
    pub eval_chunk: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_batch() -> usize {
    128
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_eval_chunk() -> usize {
    1000
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: default_seeds(),
            batch_size: default_batch(),
            out_dir: default_out(),
            checkpoint_every: 0,
            deterministic: true,
            dense_logging: false,
            scale: Scale::Desk,
            eval_chunk: default_eval_chunk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DatasetSpec,
    #[serde(default)]
    pub optim: OptimizerSpec,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything except the prune gate, which only the prune phase needs.
    pub fn validate(&self) -> Result<()> {
        self.model.layout()?;
        self.optim.validate()?;
        self.baseline_reg()?.validate(self.optim.learning_rate)?;
        self.prune_reg()?.validate(self.optim.learning_rate)?;
        if let Some(g) = &self.prune.gate {
            g.validate()?;
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        if self.run.batch_size == 0 || self.run.eval_chunk == 0 {
            return Err(Error::Config("run.batch_size and run.eval_chunk must be positive".into()));
        }
        Ok(())
    }

    pub fn baseline_reg(&self) -> Result<RegSpec> {
        self.baseline.reg.spec()
    }

    pub fn prune_reg(&self) -> Result<RegSpec> {
        self.prune.reg.spec()
    }

    pub fn gate(&self) -> Result<GateSpec> {
        let gate = self
            .prune
            .gate
            .ok_or_else(|| Error::Config("prune.gate with an explicit slope `a` is required to prune".into()))?;
        gate.validate()?;
        Ok(gate)
    }

    pub fn baseline_epochs(&self) -> usize {
        self.baseline.epochs.unwrap_or(match self.run.scale {
            Scale::Desk => DESK_EPOCHS.0,
            Scale::Paper => PAPER_EPOCHS.0,
        })
    }

    pub fn prune_epochs(&self) -> usize {
        self.prune.epochs.unwrap_or(match self.run.scale {
            Scale::Desk => DESK_EPOCHS.1,
            Scale::Paper => PAPER_EPOCHS.1,
        })
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Hash of what determines a prune run's outputs: everything but the
    /// output location, the seed list and the checkpoint cadence.
    pub fn run_hash(&self) -> String {
        let mut c = self.clone();
        c.run.out_dir = PathBuf::new();
        c.run.seeds = Vec::new();
        c.run.checkpoint_every = 0;
        c.hash()
    }

    /// Hash of what determines a baseline run: [`Self::run_hash`] without the
    /// prune section and dense logging.
    pub fn baseline_hash(&self) -> String {
        let mut c = self.clone();
        c.prune = PruneConfig::default();
        c.run.dense_logging = false;
        c.run_hash()
    }
}
