//! Grid sweeps over penalty kind, λ and gate slope, repeated across seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RegConfig};
use super::{ensure_baseline, ensure_prune, load_splits};
use crate::error::{Error, Result};
use crate::optim::RegKind;
use crate::prune::GateSpec;
use crate::tensor::Scalar;

/// Grid file. Omitted axes fall back to the config's prune settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default)]
    pub reg: Option<Vec<RegKind>>,
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
    #[serde(default)]
    pub a: Option<Vec<f64>>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub reg: RegConfig,
    pub gate: GateSpec,
}

impl GridPoint {
    pub fn label(&self) -> String {
        let kind = format!("{:?}", self.reg.kind).to_lowercase();
        match self.reg.lambda {
            Some(l) => format!("{kind}-lambda{l}-a{}", self.gate.a),
            None => format!("{kind}-a{}", self.gate.a),
        }
    }

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.prune.reg = self.reg;
        c.prune.gate = Some(self.gate);
        c
    }
}

impl Grid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn points(&self, cfg: &ExperimentConfig) -> Result<Vec<GridPoint>> {
        let base_gate = cfg.prune.gate;
        let kinds = self.reg.clone().unwrap_or_else(|| vec![cfg.prune.reg.kind]);
        let gates: Vec<GateSpec> = match &self.a {
            Some(a) => a
                .iter()
                .map(|&a| GateSpec {
                    kind: base_gate.map(|g| g.kind).unwrap_or_default(),
                    a,
                })
                .collect(),
            None => vec![cfg.gate()?],
        };
        let mut out = Vec::new();
        for &kind in &kinds {
            let regs: Vec<RegConfig> = match (&self.lambda, kind) {
                (_, RegKind::None) => vec![RegConfig::default()],
                (Some(ls), _) => ls.iter().map(|&l| RegConfig::new(kind, l)).collect(),
                (None, _) => vec![RegConfig { kind, ..cfg.prune.reg }],
            };
            for reg in &regs {
                for gate in &gates {
                    out.push(GridPoint { reg: *reg, gate: *gate });
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation, 0 for a single run.
    pub std: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MetricSummary { mean, std, n }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointSummary {
    pub label: String,
    pub point: GridPoint,
    pub runs: Vec<RunEntry>,
    pub failures: Vec<Failure>,
    /// Final-epoch metrics over successful seeds.
    pub metrics: BTreeMap<String, MetricSummary>,
    /// Final-epoch metrics of each successful run, in `runs` order.
    pub per_seed: Vec<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub seeds: Vec<u64>,
    pub points: Vec<PointSummary>,
}

impl SweepSummary {
    pub fn point(&self, label: &str) -> Option<&PointSummary> {
        self.points.iter().find(|p| p.label == label)
    }
}

/// One prune run per grid point and seed, all from a shared per-seed baseline
/// kept in `out/baseline-seed<N>`. Finished runs of the same settings are reused. A failing run is recorded and the sweep continues.
pub fn run_sweep<T: Scalar>(cfg: &ExperimentConfig, grid: &Grid, out: &Path) -> Result<SweepSummary> {
    cfg.validate()?;
    let points = grid.points(cfg)?;
    let seeds = grid.seeds.clone().unwrap_or_else(|| cfg.run.seeds.clone());
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let splits = load_splits::<T>(cfg)?;
    let mut baselines = Vec::new();
    for &seed in &seeds {
        let dir = out.join(format!("baseline-seed{seed}"));
        baselines.push(ensure_baseline(cfg, seed, &splits, &dir));
    }
    let mut summaries = Vec::new();
    for point in &points {
        let label = point.label();
        let pcfg = point.apply(cfg);
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        let mut per_seed = Vec::new();
        for (&seed, baseline) in seeds.iter().zip(&baselines) {
            let dir = out.join(&label).join(format!("seed{seed}"));
            let result = match baseline {
                Ok(b) => ensure_prune(&pcfg, &splits, b, &dir),
                Err(e) => Err(Error::Config(format!("baseline failed: {e}"))),
            };
            match result {
                Ok(r) => {
                    per_seed.push(r.final_metrics());
                    runs.push(RunEntry { seed, dir });
                }
                Err(e) => {
                    log::warn!("{label} seed {seed} failed: {e}");
                    failures.push(Failure {
                        seed,
                        error: e.to_string(),
                    });
                }
            }
        }
        let mut metrics = BTreeMap::new();
        if let Some(first) = per_seed.first() {
            for key in first.keys() {
                let vals: Vec<f64> = per_seed.iter().filter_map(|m| m.get(key).copied()).collect();
                metrics.insert(key.clone(), MetricSummary::of(&vals));
            }
        }
        summaries.push(PointSummary {
            label,
            point: point.clone(),
            runs,
            failures,
            metrics,
            per_seed,
        });
    }
    let summary = SweepSummary {
        seeds,
        points: summaries,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("summary.json");
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
