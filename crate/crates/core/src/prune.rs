//! Magnitude-proportional stochastic gating of weights.
//!
//! After every optimizer update each weight `w` is kept with probability
//! `φ(|w|)` and otherwise set to exactly zero. Two gate shapes are provided:
//!
//! * sigmoid gate: `φ(w) = 1 − 4σ(a|w|)(1 − σ(a|w|))`, which equals `tanh²(a|w|/2)`
//! * gaussian gate: `φ(w) = 1 − exp(−a·w²/2)`
//!
//! Both satisfy `φ(0) = 0`, so a zeroed weight that receives no update stays
//! zero. Masks are drawn fresh every step; there is no persistent pruned set.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::optim::{Optimizer, RegSpec};
use crate::rng::{derive_rng, RngState};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    #[default]
    Sigmoid,
    Gaussian,
}

/// Gate family and slope `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    #[serde(default)]
    pub kind: GateKind,
    pub a: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GateSpec {
    pub fn sigmoid(a: f64) -> Self {
        GateSpec {
            kind: GateKind::Sigmoid,
            a,
        }
    }

    pub fn gaussian(a: f64) -> Self {
        GateSpec {
            kind: GateKind::Gaussian,
            a,
        }
    }

    /// A gate that keeps every nonzero weight of normal magnitude.
    pub fn keep_all() -> Self {
        Self::sigmoid(f64::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::Config(format!("gate slope a must be positive and finite, got {}", self.a)));
        }
        Ok(())
    }

    /// `a|w|` for the sigmoid gate, `a·w²/2` for the gaussian gate.
    fn exponent(&self, w: f64) -> f64 {
        match self.kind {
            GateKind::Sigmoid => self.a * w.abs(),
            GateKind::Gaussian => 0.5 * self.a * w * w,
        }
    }

    /// Probability of zeroing a weight of value `w`: `1 − φ(|w|)`.
    ///
    /// Computed directly rather than as `1 − φ` so that it stays positive
    /// for large `a|w|`.
    pub fn drop_prob(&self, w: f64) -> f64 {
        let w = w.abs();
        match self.kind {
            GateKind::Sigmoid => {
                let x = self.a * w;
                if x.is_nan() {
                    return 1.0;
                }
                // 4σ(x)σ(−x) = 4e^{−x}/(1 + e^{−x})², one exp
                let e = (-x).exp();
                4.0 * e / ((1.0 + e) * (1.0 + e))
            }
            GateKind::Gaussian => {
                let e = -0.5 * self.a * w * w;
                if e.is_nan() {
                    return 1.0;
                }
                e.exp()
            }
        }
    }

    /// Keep probability `φ(|w|)`.
    pub fn keep_prob(&self, w: f64) -> f64 {
        match self.kind {
            GateKind::Sigmoid => {
                let x = self.a * w.abs();
                if x.is_nan() {
                    return 0.0;
                }
                let s = sigmoid(x);
                1.0 - 4.0 * s * sigmoid(-x)
            }
            GateKind::Gaussian => -(-0.5 * self.a * w * w).exp_m1(),
        }
        .clamp(0.0, 1.0)
    }
}

/// Keep probability of `w` under `gate`.
pub fn gate_prob(gate: &GateSpec, w: f64) -> f64 {
    gate.keep_prob(w)
}

/// Binary gate outcomes for one weight tensor; `true` keeps the weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, keep: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != keep.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("mask has {} entries", keep.len()),
            });
        }
        Ok(Mask { shape, keep })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Keeps `w` iff `u ≥ 1 − φ(|w|)` for a fresh uniform `u`. Zero weights have
/// `φ = 0` and are dropped without consuming randomness.
#[inline]
fn draw<R: Rng>(gate: &GateSpec, w: f64, rng: &mut R) -> bool {
    if w == 0.0 {
        return false;
    }
    let u = rng.gen::<f64>();
    if gate.exponent(w) > 40.0 {
        // drop probability is below 2^-53, the spacing of u, so only u = 0 can drop
        return u > 0.0 || gate.drop_prob(w) == 0.0;
    }
    u >= gate.drop_prob(w)
}

/// One independent Bernoulli draw per element: `z = 1` with probability `φ(|w|)`.
pub fn sample_mask<T: Scalar, R: Rng>(gate: &GateSpec, weights: &Tensor<T>, rng: &mut R) -> Mask {
    Mask {
        shape: weights.shape().to_vec(),
        keep: weights.data().iter().map(|w| draw(gate, w.as_f64(), rng)).collect(),
    }
}

/// `w · z`, writing `+0.0` for every dropped weight.
pub fn apply_mask<T: Scalar>(weights: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let mut out = weights.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_in_place<T: Scalar>(weights: &mut Tensor<T>, mask: &Mask) -> Result<()> {
    if weights.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            left: weights.shape().to_vec(),
            right: mask.shape.clone(),
        });
    }
    for (w, &k) in weights.data_mut().iter_mut().zip(&mask.keep) {
        if !k {
            *w = T::zero();
        }
    }
    Ok(())
}

/// Per-tensor gate generators, one stream per weight tensor keyed by layer id.
#[derive(Debug, Clone)]
pub struct GateStreams {
    streams: Vec<(String, ChaCha8Rng)>,
}

impl GateStreams {
    pub fn new<T: Scalar>(seed: u64, net: &Network<T>) -> Self {
        GateStreams {
            streams: net
                .params()
                .iter()
                .map(|p| (p.layer_id.clone(), derive_rng(seed, &format!("gate/{}", p.layer_id))))
                .collect(),
        }
    }

    pub fn stream_mut(&mut self, layer_id: &str) -> Option<&mut ChaCha8Rng> {
        self.streams.iter_mut().find(|(id, _)| id == layer_id).map(|(_, r)| r)
    }

    pub fn states(&self) -> Vec<(String, RngState)> {
        self.streams.iter().map(|(id, r)| (id.clone(), RngState::capture(r))).collect()
    }

    pub fn from_states(states: &[(String, RngState)]) -> Result<Self> {
        let streams = states
            .iter()
            .map(|(id, s)| {
                s.restore()
                    .map(|r| (id.clone(), r))
                    .ok_or_else(|| Error::Config(format!("corrupt gate rng state for `{id}`")))
            })
            .collect::<Result<_>>()?;
        Ok(GateStreams { streams })
    }
}

/// Loss and accuracy of the minibatch a step was computed on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// One training step: gradient of data loss plus penalty, optimizer update of
/// every parameter, then (when `gate` is given) a fresh mask sampled on the
/// updated weights and applied. Biases are never gated.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    optimizer: &mut Optimizer<T>,
    reg: &RegSpec,
    gate: Option<&GateSpec>,
    x: &Tensor<T>,
    labels: &[usize],
    streams: &mut GateStreams,
) -> Result<StepStats> {
    let lg = net.loss_and_grad(x, labels)?;
    optimizer.step(net, lg.grads, reg);
    if let Some(gate) = gate {
        for p in net.params_mut() {
            let rng = streams
                .stream_mut(&p.layer_id)
                .ok_or_else(|| Error::layer(&p.layer_id, "no gate stream for layer"))?;
            for w in p.weights.data_mut() {
                if !draw(gate, w.as_f64(), rng) {
                    *w = T::zero();
                }
            }
        }
    }
    Ok(StepStats {
        loss: lg.loss,
        correct: lg.correct,
    })
}

/// One gated training step over a minibatch.
pub fn wtonp_step<T: Scalar>(
    net: &mut Network<T>,
    optimizer: &mut Optimizer<T>,
    reg: &RegSpec,
    gate: &GateSpec,
    x: &Tensor<T>,
    labels: &[usize],
    streams: &mut GateStreams,
) -> Result<StepStats> {
    train_step(net, optimizer, reg, Some(gate), x, labels, streams)
}

/// One-shot global magnitude pruning: zeroes the `⌊target·m⌋` weights of
/// smallest magnitude across all layers (ties broken by position). Biases untouched.
pub fn magnitude_threshold_prune<T: Scalar>(net: &mut Network<T>, target_sparsity: f64) -> Result<()> {
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::Config(format!(
            "target sparsity must lie in [0, 1), got {target_sparsity}"
        )));
    }
    let m = net.num_weights();
    let k = (target_sparsity * m as f64).floor() as usize;
    if k == 0 {
        return Ok(());
    }
    let mut order: Vec<(T, usize, usize)> = net
        .params()
        .iter()
        .enumerate()
        .flat_map(|(l, p)| p.weights.data().iter().enumerate().map(move |(i, w)| (w.abs(), l, i)))
        .collect();
    order.select_nth_unstable_by(k - 1, |a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut params = net.params_mut();
    for &(_, l, i) in &order[..k] {
        params[l].weights.data_mut()[i] = T::zero();
    }
    Ok(())
}
