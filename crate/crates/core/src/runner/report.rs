//! Report files derived from a finished run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::{read_manifest, Checkpoint, MANIFEST, WEIGHTS};
use super::{epoch_metrics, FINAL_DIR, METRICS_FILE, NODE_STATS_FILE};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::metrics::{
    connection_map_export, evaluate, group_compensation, nodes_per_digit, pruned_node_fraction,
    pruned_weight_fraction, read_metrics_csv, NodeStat,
};
use crate::tensor::{DType, Scalar};

/// One line of `node_stats.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRow {
    pub epoch: usize,
    pub layer: String,
    pub node: usize,
    pub pruned_ratio: f64,
    pub mean_abs_nonzero: f64,
}

impl NodeRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.layer, self.node, self.pruned_ratio, self.mean_abs_nonzero
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return None;
        }
        Some(NodeRow {
            epoch: f[0].parse().ok()?,
            layer: f[1].to_string(),
            node: f[2].parse().ok()?,
            pruned_ratio: f[3].parse().ok()?,
            mean_abs_nonzero: f[4].parse().ok()?,
        })
    }
}

pub fn read_node_stats(path: &Path) -> Result<Vec<NodeRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, l)| NodeRow::parse(l).ok_or_else(|| Error::format(path, format!("malformed row {}", i + 2))))
        .collect()
}

/// One line of `steps.csv`: structure after the gate of one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub epoch: usize,
    pub pruned_weight_frac: f64,
    pub pruned_node_frac: f64,
}

impl StepRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.step, self.epoch, self.pruned_weight_frac, self.pruned_node_frac
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return None;
        }
        Some(StepRow {
            step: f[0].parse().ok()?,
            epoch: f[1].parse().ok()?,
            pruned_weight_frac: f[2].parse().ok()?,
            pruned_node_frac: f[3].parse().ok()?,
        })
    }
}

pub fn read_steps(path: &Path) -> Result<Vec<StepRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, l)| StepRow::parse(l).ok_or_else(|| Error::format(path, format!("malformed row {}", i + 2))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub connection_maps: Vec<PathBuf>,
    pub compensation: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Summary {
    seed: u64,
    phase: String,
    epochs: usize,
    config_hash: String,
    /// Metrics logged at the last epoch.
    #[serde(rename = "final")]
    final_metrics: BTreeMap<String, f64>,
    /// Recomputed from the final checkpoint.
    recomputed: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nodes_per_digit: Option<Vec<usize>>,
}

const COMPENSATION_HEADER: &str = "epoch,group,nodes,mean_abs_mean,mean_abs_var,ratio_mean,ratio_var";

/// Writes `summary.json`, `connection_map_<layer>.csv` for each dense layer and
/// `compensation_<layer>.csv` for each parametric layer into `run_dir`.
///
/// Compensation groups are fixed by the final epoch: nodes whose incoming
/// weights are all zero at the end are "zeroed", the rest "surviving".
pub fn emit_reports(run_dir: &Path) -> Result<ReportFiles> {
    let fin = run_dir.join(FINAL_DIR);
    let required = [
        run_dir.join(METRICS_FILE),
        run_dir.join(NODE_STATS_FILE),
        fin.join(MANIFEST),
        fin.join(WEIGHTS),
    ];
    let missing: Vec<String> = required
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.strip_prefix(run_dir).unwrap_or(p).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs {
            dir: run_dir.to_path_buf(),
            missing,
        });
    }
    match read_manifest(&fin)?.dtype {
        DType::F32 => emit::<f32>(run_dir),
        DType::F64 => emit::<f64>(run_dir),
    }
}

fn emit<T: Scalar>(run_dir: &Path) -> Result<ReportFiles> {
    let ck = Checkpoint::<T>::load(&run_dir.join(FINAL_DIR))?;
    let net = &ck.net;
    let rows = read_metrics_csv(&run_dir.join(METRICS_FILE))?;
    let last = rows.iter().map(|r| r.epoch).max().unwrap_or(0);

    let mut recomputed = BTreeMap::new();
    recomputed.insert("train/pruned_weight_frac".to_string(), pruned_weight_fraction(net));
    let nodes = pruned_node_fraction(net);
    recomputed.insert("train/pruned_node_frac".to_string(), nodes.global);
    for l in &nodes.per_layer {
        recomputed.insert(format!("train/{}/pruned_node_frac", l.layer_id), l.fraction());
    }
    let summary = Summary {
        seed: ck.manifest.seed,
        phase: ck.manifest.phase.as_str().to_string(),
        epochs: last,
        config_hash: ck.manifest.config_hash.clone(),
        final_metrics: epoch_metrics(&rows, last),
        recomputed,
        nodes_per_digit: nodes_per_digit(net).ok().map(|d| d.counts),
    };
    let summary_path = run_dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    fs::write(&summary_path, json).map_err(|e| Error::io(&summary_path, e))?;

    let mut connection_maps = Vec::new();
    for p in net.params().iter().filter(|p| !p.is_conv()) {
        let path = run_dir.join(format!("connection_map_{}.csv", p.layer_id));
        connection_map_export(net, &p.layer_id, &path)?;
        connection_maps.push(path);
    }

    let node_rows = read_node_stats(&run_dir.join(NODE_STATS_FILE))?;
    let mut compensation = Vec::new();
    for p in net.params() {
        let id = &p.layer_id;
        let mine: Vec<&NodeRow> = node_rows.iter().filter(|r| &r.layer == id).collect();
        let Some(final_epoch) = mine.iter().map(|r| r.epoch).max() else {
            continue;
        };
        let mut zeroed = vec![false; p.num_nodes()];
        for r in mine.iter().filter(|r| r.epoch == final_epoch) {
            zeroed[r.node] = r.pruned_ratio == 1.0;
        }
        let mut by_epoch: BTreeMap<usize, Vec<NodeStat>> = BTreeMap::new();
        for r in &mine {
            by_epoch.entry(r.epoch).or_default().push(NodeStat {
                pruned_ratio: r.pruned_ratio,
                mean_abs_nonzero: r.mean_abs_nonzero,
            });
        }
        let mut text = String::from(COMPENSATION_HEADER);
        text.push('\n');
        for (epoch, stats) in &by_epoch {
            let c = group_compensation(stats, &zeroed)?;
            for (name, g) in [("zeroed", c.zeroed), ("surviving", c.surviving)] {
                text.push_str(&format!(
                    "{epoch},{name},{},{},{},{},{}\n",
                    g.nodes, g.mean_abs_mean, g.mean_abs_var, g.ratio_mean, g.ratio_var
                ));
            }
        }
        let path = run_dir.join(format!("compensation_{id}.csv"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        compensation.push(path);
    }
    Ok(ReportFiles {
        summary: summary_path,
        connection_maps,
        compensation,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: String,
    pub samples: usize,
    pub loss: f64,
    pub error_rate: f64,
    pub pruned_weight_frac: f64,
    pub pruned_node_frac: f64,
}

/// Evaluates a saved checkpoint on one split of a dataset.
pub fn evaluate_checkpoint(checkpoint_dir: &Path, dataset: &DatasetSpec, split: &str) -> Result<EvalReport> {
    match read_manifest(checkpoint_dir)?.dtype {
        DType::F32 => eval_as::<f32>(checkpoint_dir, dataset, split),
        DType::F64 => eval_as::<f64>(checkpoint_dir, dataset, split),
    }
}

fn eval_as<T: Scalar>(checkpoint_dir: &Path, dataset: &DatasetSpec, split: &str) -> Result<EvalReport> {
    let ck = Checkpoint::<T>::load(checkpoint_dir)?;
    let splits = dataset.load::<T>()?.reshape_samples(ck.net.input_shape())?;
    let data = splits
        .get(split)
        .ok_or_else(|| Error::Config(format!("dataset has no `{split}` split")))?;
    let e = evaluate(&ck.net, data, 1000)?;
    Ok(EvalReport {
        dataset: data.name.clone(),
        split: split.to_string(),
        samples: data.len(),
        loss: e.loss,
        error_rate: e.error_rate,
        pruned_weight_frac: pruned_weight_fraction(&ck.net),
        pruned_node_frac: pruned_node_fraction(&ck.net).global,
    })
}
