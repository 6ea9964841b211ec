//! Two-phase experiments: train a dense baseline, then continue training with
//! gating switched on. Each phase writes a run directory:
//!
//! ```text
//! config.toml      the experiment config
//! metrics.csv      epoch,split,layer,metric,value (epoch 0 = state before training)
//! node_stats.csv   epoch,layer,node,pruned_ratio,mean_abs_nonzero (epochs ≥ 1)
//! steps.csv        step,epoch,pruned_weight_frac,pruned_node_frac (dense logging only)
//! checkpoints/epoch-NNNN/   intermediate checkpoints plus history snapshots
//! final/           final checkpoint
//! ```

mod checkpoint;
mod config;
mod report;
mod sweep;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub use checkpoint::{read_manifest, Checkpoint, CheckpointMeta, Manifest, Phase, MANIFEST, WEIGHTS};
pub use config::{
    Architecture, BaselineConfig, ExperimentConfig, ModelConfig, PruneConfig, RegConfig, RunConfig, Scale,
    DESK_EPOCHS, PAPER_EPOCHS,
};
pub use report::{
    emit_reports, evaluate_checkpoint, read_node_stats, read_steps, EvalReport, NodeRow, ReportFiles, StepRow,
};
pub use sweep::{run_sweep, Grid, GridPoint, MetricSummary, PointSummary, SweepSummary};

use crate::data::{minibatches, Splits};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate, layer_pruned_weight_fraction, node_stats, nodes_per_digit, pruned_node_fraction,
    pruned_nodes_with_bias, pruned_weight_fraction, read_metrics_csv, write_metrics_csv, MetricRow,
};
use crate::nn::Network;
use crate::optim::{Optimizer, RegSpec};
use crate::prune::{train_step, GateSpec, GateStreams};
use crate::rng::derive_seed;
use crate::tensor::Scalar;

pub const METRICS_FILE: &str = "metrics.csv";
pub const NODE_STATS_FILE: &str = "node_stats.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const FINAL_DIR: &str = "final";
const NODE_STATS_HEADER: &str = "epoch,layer,node,pruned_ratio,mean_abs_nonzero";
const STEPS_HEADER: &str = "step,epoch,pruned_weight_frac,pruned_node_frac";

/// Metric rows of one phase and where they were written.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub seed: u64,
    pub phase: Phase,
    pub epochs: usize,
    pub rows: Vec<MetricRow>,
}

/// `split/metric` for global rows, `split/layer/metric` otherwise.
pub fn metric_key(row: &MetricRow) -> String {
    if row.layer.is_empty() {
        format!("{}/{}", row.split, row.metric)
    } else {
        format!("{}/{}/{}", row.split, row.layer, row.metric)
    }
}

impl RunOutcome {
    /// Metrics of the last recorded epoch, keyed by [`metric_key`].
    pub fn final_metrics(&self) -> BTreeMap<String, f64> {
        epoch_metrics(&self.rows, self.last_epoch())
    }

    pub fn last_epoch(&self) -> usize {
        self.rows.iter().map(|r| r.epoch).max().unwrap_or(0)
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.final_metrics().get(key).copied()
    }

    /// `(epoch, value)` for one metric key, in epoch order.
    pub fn series(&self, key: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| metric_key(r) == key)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn final_checkpoint_dir(&self) -> PathBuf {
        self.dir.join(FINAL_DIR)
    }
}

fn epoch_metrics(rows: &[MetricRow], epoch: usize) -> BTreeMap<String, f64> {
    rows.iter()
        .filter(|r| r.epoch == epoch)
        .map(|r| (metric_key(r), r.value))
        .collect()
}

/// Loads the configured dataset shaped for the configured model's input.
pub fn load_splits<T: Scalar>(cfg: &ExperimentConfig) -> Result<Splits<T>> {
    let (shape, _) = cfg.model.layout()?;
    cfg.data.load::<T>()?.reshape_samples(&shape)
}

fn architecture_name(cfg: &ExperimentConfig) -> String {
    serde_json::to_value(cfg.model.architecture)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn io<E: Into<std::io::Error>>(path: &Path) -> impl FnOnce(E) -> Error + '_ {
    move |e| Error::io(path, e.into())
}

/// Per-node rows for every parametric layer.
fn node_rows<T: Scalar>(net: &Network<T>, epoch: usize) -> Vec<NodeRow> {
    let mut out = Vec::new();
    for p in net.params() {
        for (node, s) in node_stats(p).into_iter().enumerate() {
            out.push(NodeRow {
                epoch,
                layer: p.layer_id.clone(),
                node,
                pruned_ratio: s.pruned_ratio,
                mean_abs_nonzero: s.mean_abs_nonzero,
            });
        }
    }
    out
}

/// Weight, node and per-layer structure metrics (split `train`).
fn structure_rows<T: Scalar>(net: &Network<T>, epoch: usize, rows: &mut Vec<MetricRow>) {
    let split = "train";
    rows.push(MetricRow::new(epoch, split, "", "pruned_weight_frac", pruned_weight_fraction(net)));
    let nodes = pruned_node_fraction(net);
    rows.push(MetricRow::new(epoch, split, "", "pruned_node_frac", nodes.global));
    for l in &nodes.per_layer {
        rows.push(MetricRow::new(epoch, split, &l.layer_id, "pruned_node_frac", l.fraction()));
        rows.push(MetricRow::new(epoch, split, &l.layer_id, "pruned_nodes", l.pruned as f64));
    }
    for p in net.params() {
        let id = &p.layer_id;
        let stats = node_stats(p);
        let n = stats.len() as f64;
        rows.push(MetricRow::new(epoch, split, id, "pruned_weight_frac", layer_pruned_weight_fraction(p)));
        rows.push(MetricRow::new(epoch, split, id, "pruned_nodes_with_bias", pruned_nodes_with_bias(p) as f64));
        rows.push(MetricRow::new(
            epoch,
            split,
            id,
            "mean_abs_nonzero",
            stats.iter().map(|s| s.mean_abs_nonzero).sum::<f64>() / n,
        ));
        rows.push(MetricRow::new(
            epoch,
            split,
            id,
            "pruned_ratio_mean",
            stats.iter().map(|s| s.pruned_ratio).sum::<f64>() / n,
        ));
    }
    if let Ok(d) = nodes_per_digit(net) {
        let id = &net.params().last().expect("parametric layer").layer_id;
        rows.push(MetricRow::new(epoch, split, id, "nodes_per_digit_mean", d.mean));
        for (c, &count) in d.counts.iter().enumerate() {
            rows.push(MetricRow::new(epoch, split, id, &format!("nodes_per_digit_{c}"), count as f64));
        }
    }
}

fn eval_rows<T: Scalar>(net: &Network<T>, splits: &Splits<T>, chunk: usize, epoch: usize, rows: &mut Vec<MetricRow>) -> Result<()> {
    for (name, data) in [("val", splits.val.as_ref()), ("test", Some(&splits.test))] {
        if let Some(d) = data {
            let e = evaluate(net, d, chunk)?;
            rows.push(MetricRow::new(epoch, name, "", "loss", e.loss));
            rows.push(MetricRow::new(epoch, name, "", "error_rate", e.error_rate));
        }
    }
    Ok(())
}

/// State of a phase that is about to run (or resume).
struct PhaseRun<'a, T: Scalar> {
    cfg: &'a ExperimentConfig,
    splits: &'a Splits<T>,
    phase: Phase,
    seed: u64,
    net: Network<T>,
    opt: Optimizer<T>,
    streams: GateStreams,
    reg: RegSpec,
    gate: Option<GateSpec>,
    /// Completed epochs.
    start_epoch: usize,
    rows: Vec<MetricRow>,
    /// Existing history files to carry over (resume only).
    history: Option<PathBuf>,
    dir: PathBuf,
}

impl<'a, T: Scalar> PhaseRun<'a, T> {
    fn config_hash(&self) -> String {
        match self.phase {
            Phase::Baseline => self.cfg.baseline_hash(),
            Phase::Prune => self.cfg.run_hash(),
        }
    }

    fn checkpoint(&self, epoch: usize) -> Checkpoint<T> {
        Checkpoint::capture(
            &self.net,
            &self.opt,
            CheckpointMeta {
                architecture: architecture_name(self.cfg),
                config_hash: self.config_hash(),
                phase: self.phase,
                epoch,
                seed: self.seed,
                gate: self.streams.states(),
                metrics: epoch_metrics(&self.rows, epoch),
            },
        )
    }

    fn open_append(&self, name: &str, header: &str) -> Result<BufWriter<fs::File>> {
        let path = self.dir.join(name);
        let mut text = String::new();
        match &self.history {
            Some(h) if h.join(name).exists() => {
                let src = h.join(name);
                text = fs::read_to_string(&src).map_err(io(&src))?;
            }
            _ => {
                text.push_str(header);
                text.push('\n');
            }
        }
        fs::write(&path, text).map_err(io(&path))?;
        let f = fs::OpenOptions::new().append(true).open(&path).map_err(io(&path))?;
        Ok(BufWriter::new(f))
    }

    fn run(mut self) -> Result<RunOutcome> {
        let epochs = match self.phase {
            Phase::Baseline => self.cfg.baseline_epochs(),
            Phase::Prune => self.cfg.prune_epochs(),
        };
        let chunk = self.cfg.run.eval_chunk;
        let bs = self.cfg.run.batch_size;
        fs::create_dir_all(&self.dir).map_err(io(&self.dir))?;
        let cfg_path = self.dir.join("config.toml");
        fs::write(&cfg_path, self.cfg.to_toml()).map_err(io(&cfg_path))?;
        let metrics_path = self.dir.join(METRICS_FILE);

        if self.history.is_none() {
            eval_rows(&self.net, self.splits, chunk, 0, &mut self.rows)?;
            structure_rows(&self.net, 0, &mut self.rows);
        }
        write_metrics_csv(&metrics_path, &self.rows)?;
        let mut nodes_out = self.open_append(NODE_STATS_FILE, NODE_STATS_HEADER)?;
        let mut steps_out = if self.cfg.run.dense_logging {
            Some(self.open_append(STEPS_FILE, STEPS_HEADER)?)
        } else {
            None
        };

        let train = &self.splits.train;
        for epoch in self.start_epoch + 1..=epochs {
            let label = format!("shuffle/{}/{epoch}", self.phase.as_str());
            let batches = minibatches(train.len(), bs.min(train.len()), derive_seed(self.seed, &label))?;
            let (mut loss, mut correct) = (0.0, 0usize);
            for b in &batches {
                let (x, y) = train.gather(b);
                let stats = train_step(&mut self.net, &mut self.opt, &self.reg, self.gate.as_ref(), &x, &y, &mut self.streams)
                    .map_err(|e| match e {
                        Error::Divergence { loss, .. } => Error::Divergence {
                            loss,
                            step: self.net.step_counter,
                        },
                        other => other,
                    })?;
                loss += stats.loss * b.len() as f64;
                correct += stats.correct;
                if let Some(out) = steps_out.as_mut() {
                    let row = StepRow {
                        step: self.net.step_counter,
                        epoch,
                        pruned_weight_frac: pruned_weight_fraction(&self.net),
                        pruned_node_frac: pruned_node_fraction(&self.net).global,
                    };
                    writeln!(out, "{}", row.to_csv_line()).map_err(io(&self.dir))?;
                }
            }
            let n = train.len() as f64;
            self.rows.push(MetricRow::new(epoch, "train", "", "loss", loss / n));
            self.rows.push(MetricRow::new(epoch, "train", "", "error_rate", 1.0 - correct as f64 / n));
            eval_rows(&self.net, self.splits, chunk, epoch, &mut self.rows)?;
            structure_rows(&self.net, epoch, &mut self.rows);
            write_metrics_csv(&metrics_path, &self.rows)?;
            for r in node_rows(&self.net, epoch) {
                writeln!(nodes_out, "{}", r.to_csv_line()).map_err(io(&self.dir))?;
            }
            nodes_out.flush().map_err(io(&self.dir))?;
            if let Some(out) = steps_out.as_mut() {
                out.flush().map_err(io(&self.dir))?;
            }
            let m = epoch_metrics(&self.rows, epoch);
            log::info!(
                "seed {} {} epoch {epoch}/{epochs}: test error {:.4}, pruned weights {:.4}, pruned nodes {:.4}",
                self.seed,
                self.phase.as_str(),
                m.get("test/error_rate").copied().unwrap_or(f64::NAN),
                m["train/pruned_weight_frac"],
                m["train/pruned_node_frac"],
            );
            let every = self.cfg.run.checkpoint_every;
            if every > 0 && epoch % every == 0 && epoch < epochs {
                let dir = self.dir.join("checkpoints").join(format!("epoch-{epoch:04}"));
                self.checkpoint(epoch).save(&dir)?;
                for f in [METRICS_FILE, NODE_STATS_FILE, STEPS_FILE] {
                    let src = self.dir.join(f);
                    if src.exists() {
                        fs::copy(&src, dir.join(f)).map_err(io(&src))?;
                    }
                }
            }
        }
        let last = epochs.max(self.start_epoch);
        self.checkpoint(last).save(&self.dir.join(FINAL_DIR))?;
        Ok(RunOutcome {
            dir: self.dir,
            seed: self.seed,
            phase: self.phase,
            epochs: last,
            rows: self.rows,
        })
    }
}

/// Trains the dense baseline for one seed into `dir`. No gating.
pub fn run_baseline<T: Scalar>(cfg: &ExperimentConfig, seed: u64, splits: &Splits<T>, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut net = cfg.model.build::<T>()?;
    net.init_weights(derive_seed(seed, "init"));
    let opt = Optimizer::new(cfg.optim, &net);
    PhaseRun {
        cfg,
        splits,
        phase: Phase::Baseline,
        seed,
        streams: GateStreams::new(seed, &net),
        net,
        opt,
        reg: cfg.baseline_reg()?,
        gate: None,
        start_epoch: 0,
        rows: Vec::new(),
        history: None,
        dir: dir.to_path_buf(),
    }
    .run()
}

/// Reuses the baseline in `dir` when its final checkpoint matches `cfg`, otherwise trains it.
pub fn ensure_baseline<T: Scalar>(cfg: &ExperimentConfig, seed: u64, splits: &Splits<T>, dir: &Path) -> Result<Checkpoint<T>> {
    let fin = dir.join(FINAL_DIR);
    if let Ok(m) = read_manifest(&fin) {
        if m.config_hash == cfg.baseline_hash() && m.seed == seed && m.phase == Phase::Baseline && m.dtype == T::DTYPE {
            log::info!("reusing baseline {}", fin.display());
            return Checkpoint::load(&fin);
        }
    }
    let out = run_baseline(cfg, seed, splits, dir)?;
    Checkpoint::load(&out.final_checkpoint_dir())
}

fn check_architecture<T: Scalar>(cfg: &ExperimentConfig, net: &Network<T>) -> Result<()> {
    let (shape, specs) = cfg.model.layout()?;
    let expected = Network::<T>::build(&shape, &specs)?;
    if expected.input_shape() != net.input_shape() || expected.specs() != net.specs() {
        return Err(Error::Config("checkpoint architecture does not match the config".into()));
    }
    Ok(())
}

/// [`run_prune`], unless `dir` already holds a finished prune run of the
/// same config and seed, whose recorded metrics are then returned.
pub fn ensure_prune<T: Scalar>(
    cfg: &ExperimentConfig,
    splits: &Splits<T>,
    baseline: &Checkpoint<T>,
    dir: &Path,
) -> Result<RunOutcome> {
    if let Ok(m) = read_manifest(&dir.join(FINAL_DIR)) {
        let seed = baseline.manifest.seed;
        if m.config_hash == cfg.run_hash() && m.seed == seed && m.phase == Phase::Prune && m.dtype == T::DTYPE {
            if let Ok(rows) = read_metrics_csv(&dir.join(METRICS_FILE)) {
                let epochs = rows.iter().map(|r| r.epoch).max().unwrap_or(0);
                if epochs == m.epoch {
                    log::info!("reusing prune run {}", dir.display());
                    return Ok(RunOutcome {
                        dir: dir.to_path_buf(),
                        seed,
                        phase: Phase::Prune,
                        epochs,
                        rows,
                    });
                }
            }
        }
    }
    run_prune(cfg, splits, baseline, dir)
}

/// Gated training session starting from a baseline checkpoint. The seed is the baseline's.
pub fn run_prune<T: Scalar>(cfg: &ExperimentConfig, splits: &Splits<T>, baseline: &Checkpoint<T>, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    check_architecture(cfg, &baseline.net)?;
    let seed = baseline.manifest.seed;
    start_prune(cfg, splits, baseline.net.clone(), Some(baseline), seed, dir)
}

/// Gated training from a fresh initialization, skipping the baseline phase.
pub fn run_prune_from_scratch<T: Scalar>(cfg: &ExperimentConfig, seed: u64, splits: &Splits<T>, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut net = cfg.model.build::<T>()?;
    net.init_weights(derive_seed(seed, "init"));
    start_prune(cfg, splits, net, None, seed, dir)
}

fn start_prune<T: Scalar>(
    cfg: &ExperimentConfig,
    splits: &Splits<T>,
    net: Network<T>,
    baseline: Option<&Checkpoint<T>>,
    seed: u64,
    dir: &Path,
) -> Result<RunOutcome> {
    let gate = cfg.gate()?;
    let opt = match baseline {
        Some(b) if !cfg.prune.reset_optimizer => {
            let mut o = b.optimizer()?;
            o.spec = cfg.optim;
            o
        }
        _ => Optimizer::new(cfg.optim, &net),
    };
    PhaseRun {
        cfg,
        splits,
        phase: Phase::Prune,
        seed,
        streams: GateStreams::new(seed, &net),
        net,
        opt,
        reg: cfg.prune_reg()?,
        gate: Some(gate),
        start_epoch: 0,
        rows: Vec::new(),
        history: None,
        dir: dir.to_path_buf(),
    }
    .run()
}

/// Continues the phase saved in `checkpoint_dir` (an intermediate checkpoint
/// holding history snapshots) and writes the completed run to `dir`.
pub fn resume<T: Scalar>(cfg: &ExperimentConfig, splits: &Splits<T>, checkpoint_dir: &Path, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let ck = Checkpoint::<T>::load(checkpoint_dir)?;
    check_architecture(cfg, &ck.net)?;
    let m = &ck.manifest;
    let expected = match m.phase {
        Phase::Baseline => cfg.baseline_hash(),
        Phase::Prune => cfg.run_hash(),
    };
    if m.config_hash != expected {
        return Err(Error::Config("checkpoint was written under a different config".into()));
    }
    let rows: Vec<MetricRow> = read_metrics_csv(&checkpoint_dir.join(METRICS_FILE))?
        .into_iter()
        .filter(|r| r.epoch <= m.epoch)
        .collect();
    let (reg, gate) = match m.phase {
        Phase::Baseline => (cfg.baseline_reg()?, None),
        Phase::Prune => (cfg.prune_reg()?, Some(cfg.gate()?)),
    };
    PhaseRun {
        cfg,
        splits,
        phase: m.phase,
        seed: m.seed,
        opt: ck.optimizer()?,
        streams: GateStreams::from_states(&m.rng.gate)?,
        net: ck.net.clone(),
        reg,
        gate,
        start_epoch: m.rng.next_epoch - 1,
        rows,
        history: Some(checkpoint_dir.to_path_buf()),
        dir: dir.to_path_buf(),
    }
    .run()
}

#[cfg(test)]
mod tests;
