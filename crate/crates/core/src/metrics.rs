//! Weight and node pruning statistics, classification error, and exports.
//!
//! "Pruned" always means bitwise zero. Node rules:
//!
//! * dense hidden/output node: pruned when all incoming weights are zero
//! * input unit of the first parametric layer: pruned when all outgoing weights are zero
//! * conv node (output channel): pruned when its whole filter is zero
//!
//! Biases are ignored by every rule.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{LayerParams, Network};
use crate::tensor::Scalar;

/// Layer name used for the network's input units.
pub const INPUT_LAYER: &str = "input";

/// Fraction of weights (biases excluded) that are exactly zero.
pub fn pruned_weight_fraction<T: Scalar>(net: &Network<T>) -> f64 {
    let zeros: usize = net.params().iter().map(|p| p.weights.count_zeros()).sum();
    zeros as f64 / net.num_weights() as f64
}

/// Zero-weight fraction of one layer.
pub fn layer_pruned_weight_fraction<T: Scalar>(p: &LayerParams<T>) -> f64 {
    p.weights.count_zeros() as f64 / p.weights.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeAccount {
    pub layer_id: String,
    pub node_index: usize,
    /// `None` for input units.
    pub in_degree_nonzero: Option<usize>,
    /// `None` for output nodes.
    pub out_degree_nonzero: Option<usize>,
    pub is_pruned: bool,
}

/// Nonzero outgoing connections of each node of `layer` into `next`.
///
/// Node `k` feeds the `group` consecutive inputs `[k·group, (k+1)·group)` of
/// `next`, which covers dense→dense, conv→conv and conv→flatten→dense.
fn out_degrees<T: Scalar>(nodes: usize, next: &LayerParams<T>) -> Vec<usize> {
    let inputs = next.num_inputs();
    let group = (inputs / nodes).max(1);
    let w = next.weights.data();
    let mut per_input = vec![0usize; inputs];
    if next.is_conv() {
        let s = next.weights.shape();
        let k = s[2] * s[3];
        for o in 0..s[0] {
            for (i, slot) in per_input.iter_mut().enumerate() {
                let start = (o * s[1] + i) * k;
                *slot += w[start..start + k].iter().filter(|x| !x.is_zero()).count();
            }
        }
    } else {
        let out = next.num_nodes();
        for (i, slot) in per_input.iter_mut().enumerate() {
            *slot = w[i * out..(i + 1) * out].iter().filter(|x| !x.is_zero()).count();
        }
    }
    (0..nodes)
        .map(|k| per_input[(k * group).min(inputs)..((k + 1) * group).min(inputs)].iter().sum())
        .collect()
}

/// Node bookkeeping for the input units and every parametric layer.
pub fn node_accounts<T: Scalar>(net: &Network<T>) -> Vec<NodeAccount> {
    let params = net.params();
    let mut accounts = Vec::new();
    let first = params[0];
    let input_out = out_degrees(first.num_inputs(), first);
    for (i, &out) in input_out.iter().enumerate() {
        accounts.push(NodeAccount {
            layer_id: INPUT_LAYER.into(),
            node_index: i,
            in_degree_nonzero: None,
            out_degree_nonzero: Some(out),
            is_pruned: out == 0,
        });
    }
    for (l, p) in params.iter().enumerate() {
        let outs = params.get(l + 1).map(|next| out_degrees(p.num_nodes(), next));
        for node in 0..p.num_nodes() {
            let in_deg = p.node_weights(node).iter().filter(|x| !x.is_zero()).count();
            accounts.push(NodeAccount {
                layer_id: p.layer_id.clone(),
                node_index: node,
                in_degree_nonzero: Some(in_deg),
                out_degree_nonzero: outs.as_ref().map(|o| o[node]),
                is_pruned: in_deg == 0,
            });
        }
    }
    accounts
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNodes {
    pub layer_id: String,
    pub pruned: usize,
    pub total: usize,
}

impl LayerNodes {
    pub fn fraction(&self) -> f64 {
        self.pruned as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFractions {
    pub global: f64,
    /// `input` first, then parametric layers in order.
    pub per_layer: Vec<LayerNodes>,
}

impl NodeFractions {
    pub fn layer(&self, layer_id: &str) -> Option<&LayerNodes> {
        self.per_layer.iter().find(|l| l.layer_id == layer_id)
    }
}

/// Pruned-node fraction over input + hidden + output nodes, and per layer.
pub fn pruned_node_fraction<T: Scalar>(net: &Network<T>) -> NodeFractions {
    let mut per_layer: Vec<LayerNodes> = Vec::new();
    for a in node_accounts(net) {
        match per_layer.last_mut() {
            Some(l) if l.layer_id == a.layer_id => {
                l.total += 1;
                l.pruned += a.is_pruned as usize;
            }
            _ => per_layer.push(LayerNodes {
                layer_id: a.layer_id,
                pruned: a.is_pruned as usize,
                total: 1,
            }),
        }
    }
    let pruned: usize = per_layer.iter().map(|l| l.pruned).sum();
    let total: usize = per_layer.iter().map(|l| l.total).sum();
    NodeFractions {
        global: pruned as f64 / total as f64,
        per_layer,
    }
}

/// Pruned nodes of `p` whose bias is still nonzero (they keep emitting a constant).
pub fn pruned_nodes_with_bias<T: Scalar>(p: &LayerParams<T>) -> usize {
    (0..p.num_nodes())
        .filter(|&n| p.node_weights(n).iter().all(|x| x.is_zero()) && !p.bias.data()[n].is_zero())
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigitNodes {
    /// Per class: penultimate nodes with a nonzero weight into that class node.
    pub counts: Vec<usize>,
    pub mean: f64,
}

/// Nodes-per-digit for a network whose final layer is a dense `k → 10` map.
pub fn nodes_per_digit<T: Scalar>(net: &Network<T>) -> Result<DigitNodes> {
    let last = *net.params().last().expect("network has parametric layers");
    if last.is_conv() || last.num_nodes() != 10 {
        return Err(Error::Network(format!(
            "nodes per digit needs a final dense layer with 10 outputs, `{}` has shape {:?}",
            last.layer_id,
            last.weights.shape()
        )));
    }
    let counts: Vec<usize> = (0..10)
        .map(|c| last.node_weights(c).iter().filter(|x| !x.is_zero()).count())
        .collect();
    let mean = counts.iter().sum::<usize>() as f64 / 10.0;
    Ok(DigitNodes { counts, mean })
}

/// Per-node view used for the compensation analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeStat {
    /// Zero incoming weights / fan-in.
    pub pruned_ratio: f64,
    /// Mean |w| over nonzero incoming weights, 0 when all are zero.
    pub mean_abs_nonzero: f64,
}

pub fn node_stats<T: Scalar>(p: &LayerParams<T>) -> Vec<NodeStat> {
    (0..p.num_nodes())
        .map(|n| {
            let w = p.node_weights(n);
            let (count, sum) = w
                .iter()
                .filter(|x| !x.is_zero())
                .fold((0usize, 0.0f64), |(c, s), x| (c + 1, s + x.abs().as_f64()));
            NodeStat {
                pruned_ratio: (w.len() - count) as f64 / w.len() as f64,
                mean_abs_nonzero: if count == 0 { 0.0 } else { sum / count as f64 },
            }
        })
        .collect()
}

/// Mean and population variance of a node group.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupStats {
    pub nodes: usize,
    pub mean_abs_mean: f64,
    pub mean_abs_var: f64,
    pub ratio_mean: f64,
    pub ratio_var: f64,
}

fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var)
}

impl GroupStats {
    pub fn of(stats: &[NodeStat]) -> Self {
        let (mean_abs_mean, mean_abs_var) = mean_var(stats.iter().map(|s| s.mean_abs_nonzero));
        let (ratio_mean, ratio_var) = mean_var(stats.iter().map(|s| s.pruned_ratio));
        GroupStats {
            nodes: stats.len(),
            mean_abs_mean,
            mean_abs_var,
            ratio_mean,
            ratio_var,
        }
    }
}

/// Group statistics for nodes flagged in `zeroed` versus the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compensation {
    pub zeroed: GroupStats,
    pub surviving: GroupStats,
}

pub fn compensation_stats<T: Scalar>(p: &LayerParams<T>, zeroed: &[bool]) -> Result<Compensation> {
    group_compensation(&node_stats(p), zeroed)
}

/// Same as [`compensation_stats`] from precomputed per-node stats.
pub fn group_compensation(stats: &[NodeStat], zeroed: &[bool]) -> Result<Compensation> {
    if stats.len() != zeroed.len() {
        return Err(Error::Network(format!(
            "{} group flags for {} nodes",
            zeroed.len(),
            stats.len()
        )));
    }
    let (z, s): (Vec<_>, Vec<_>) = stats.iter().zip(zeroed).partition(|(_, &flag)| flag);
    let z: Vec<NodeStat> = z.into_iter().map(|(s, _)| *s).collect();
    let s: Vec<NodeStat> = s.into_iter().map(|(s, _)| *s).collect();
    Ok(Compensation {
        zeroed: GroupStats::of(&z),
        surviving: GroupStats::of(&s),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub error_rate: f64,
}

/// Mean loss and error rate, in chunks of `chunk` samples.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset<T>, chunk: usize) -> Result<Evaluation> {
    let n = data.len();
    let mut correct = 0usize;
    let mut loss = 0.0;
    let chunk = chunk.max(1);
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let (x, y) = data.gather(&idx);
        let logits = net.forward(&x)?;
        let (l, c, _) = crate::nn::softmax_cross_entropy(&logits, &y);
        loss += l * idx.len() as f64;
        correct += c;
    }
    Ok(Evaluation {
        loss: loss / n as f64,
        error_rate: 1.0 - correct as f64 / n as f64,
    })
}

/// `1 − correct/N`, argmax ties resolved to the lowest class index.
pub fn error_rate<T: Scalar>(net: &Network<T>, data: &Dataset<T>) -> Result<f64> {
    Ok(evaluate(net, data, 1000)?.error_rate)
}

/// Dense weight matrix with its nonzero indicator; row = input node, column = output node.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionMap {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl ConnectionMap {
    pub fn nonzero(&self) -> Vec<bool> {
        self.weights.iter().map(|&w| w != 0.0).collect()
    }

    /// Columns with no nonzero entry.
    pub fn zero_columns(&self) -> usize {
        (0..self.cols)
            .filter(|&c| (0..self.rows).all(|r| self.weights[r * self.cols + c] == 0.0))
            .count()
    }
}

pub fn connection_map<T: Scalar>(net: &Network<T>, layer_id: &str) -> Result<ConnectionMap> {
    let p = net
        .layer_params(layer_id)
        .ok_or_else(|| Error::Network(format!("unknown layer `{layer_id}`")))?;
    if p.is_conv() {
        return Err(Error::layer(layer_id, "connection maps are only defined for dense layers"));
    }
    Ok(ConnectionMap {
        rows: p.weights.shape()[0],
        cols: p.weights.shape()[1],
        weights: p.weights.data().iter().map(|w| w.as_f64()).collect(),
    })
}

/// Writes `input,output,weight,nonzero` rows for a dense layer.
pub fn connection_map_export<T: Scalar>(net: &Network<T>, layer_id: &str, path: &Path) -> Result<ConnectionMap> {
    let map = connection_map(net, layer_id)?;
    let p = net.layer_params(layer_id).expect("checked above");
    let mut out = String::with_capacity(map.weights.len() * 24);
    out.push_str("input,output,weight,nonzero\n");
    for (i, w) in p.weights.data().iter().enumerate() {
        let nz = !w.is_zero() as u8;
        out.push_str(&format!("{},{},{},{}\n", i / map.cols, i % map.cols, w, nz));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(map)
}

pub fn read_connection_map(path: &Path) -> Result<ConnectionMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("input,output,weight,nonzero") {
        return Err(Error::format(path, "unexpected connection map header"));
    }
    let mut entries = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = || Error::format(path, format!("malformed row {}", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let r: usize = f[0].parse().map_err(|_| bad())?;
        let c: usize = f[1].parse().map_err(|_| bad())?;
        let w: f64 = f[2].parse().map_err(|_| bad())?;
        entries.push((r, c, w));
    }
    let rows = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let cols = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    let mut weights = vec![0.0; rows * cols];
    for (r, c, w) in entries {
        weights[r * cols + c] = w;
    }
    Ok(ConnectionMap { rows, cols, weights })
}

/// One row of the long-format metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub layer: String,
    pub metric: String,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,layer,metric,value";

impl MetricRow {
    pub fn new(epoch: usize, split: &str, layer: &str, metric: &str, value: f64) -> Self {
        MetricRow {
            epoch,
            split: split.into(),
            layer: layer.into(),
            metric: metric.into(),
            value,
        }
    }

    pub fn to_csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.split, self.layer, self.metric, self.value)
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return None;
        }
        Some(MetricRow {
            epoch: f[0].parse().ok()?,
            split: f[1].into(),
            layer: f[2].into(),
            metric: f[3].into(),
            value: f[4].parse().ok()?,
        })
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv_line());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format(path, "unexpected metrics header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| MetricRow::parse(l).ok_or_else(|| Error::format(path, format!("malformed row {}", i + 2))))
        .collect()
}
