//! Optimizers and weight penalties.
//!
//! Penalties enter through the gradient: the optimizer sees
//! `data gradient + λ₂·w + λ₁·sign(w)` for weight tensors and the plain data
//! gradient for biases. With plain SGD and a pure L2 penalty this is the
//! geometric decay `w ← (1 − λε)·w − ε·∇l`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, ParamGrads};
use crate::tensor::{sign, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Default::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerSpec {
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in (0, 1)".into()));
        }
        if !(self.eps_hat > 0.0) {
            return Err(Error::Config("eps_hat must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    #[default]
    None,
    L1,
    L2,
    Elastic,
}

/// Weight penalty `λ₁‖w‖₁ + (λ₂/2)‖w‖₂²`, applied to weights only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RegSpec {
    pub kind: RegKind,
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
}

impl RegSpec {
    pub fn none() -> Self {
        RegSpec::default()
    }

    pub fn l1(lambda: f64) -> Self {
        RegSpec {
            kind: RegKind::L1,
            lambda1: lambda,
            lambda2: 0.0,
        }
    }

    pub fn l2(lambda: f64) -> Self {
        RegSpec {
            kind: RegKind::L2,
            lambda1: 0.0,
            lambda2: lambda,
        }
    }

    /// Elastic net with a single strength split evenly between the two terms.
    pub fn elastic(lambda: f64) -> Self {
        Self::elastic_split(lambda / 2.0, lambda / 2.0)
    }

    pub fn elastic_split(lambda1: f64, lambda2: f64) -> Self {
        RegSpec {
            kind: RegKind::Elastic,
            lambda1,
            lambda2,
        }
    }

    /// Builds a penalty of `kind` from one strength `lambda`.
    pub fn from_kind(kind: RegKind, lambda: f64) -> Self {
        match kind {
            RegKind::None => Self::none(),
            RegKind::L1 => Self::l1(lambda),
            RegKind::L2 => Self::l2(lambda),
            RegKind::Elastic => Self::elastic(lambda),
        }
    }

    /// Total strength `λ₁ + λ₂`.
    pub fn lambda(&self) -> f64 {
        self.lambda1 + self.lambda2
    }

    /// Checks the kind/coefficient pairing and `0 < λ·ε < 1` for each active term.
    pub fn validate(&self, learning_rate: f64) -> Result<()> {
        let (l1, l2) = (self.lambda1, self.lambda2);
        if l1 < 0.0 || l2 < 0.0 || !l1.is_finite() || !l2.is_finite() {
            return Err(Error::Config("regularization coefficients must be nonnegative".into()));
        }
        let ok = match self.kind {
            RegKind::None => l1 == 0.0 && l2 == 0.0,
            RegKind::L1 => l1 > 0.0 && l2 == 0.0,
            RegKind::L2 => l2 > 0.0 && l1 == 0.0,
            RegKind::Elastic => l1 > 0.0 && l2 > 0.0,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{:?} regularization with lambda1={l1}, lambda2={l2}",
                self.kind
            )));
        }
        for lambda in [l1, l2].into_iter().filter(|&l| l > 0.0) {
            let effective = lambda * learning_rate;
            if !(effective > 0.0 && effective < 1.0) {
                return Err(Error::Config(format!(
                    "effective decay lambda*lr = {effective} must lie in (0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Adds `λ₂·w + λ₁·sign(w)` to `grad` elementwise.
    pub fn accumulate<T: Scalar>(&self, weights: &[T], grad: &mut [T]) {
        if self.kind == RegKind::None {
            return;
        }
        let (l1, l2) = (T::of(self.lambda1), T::of(self.lambda2));
        for (g, &w) in grad.iter_mut().zip(weights) {
            *g = *g + l2 * w + l1 * sign(w);
        }
    }
}

/// Gradient of the penalty with respect to a weight tensor.
pub fn reg_gradient<T: Scalar>(reg: &RegSpec, weights: &Tensor<T>) -> Tensor<T> {
    let mut grad = Tensor::zeros(weights.shape().to_vec());
    reg.accumulate(weights.data(), grad.data_mut());
    grad
}

/// `w ← w − ε·g`.
pub fn sgd_step<T: Scalar>(learning_rate: f64, weights: &mut [T], grad: &[T]) {
    let lr = T::of(learning_rate);
    for (w, &g) in weights.iter_mut().zip(grad) {
        *w = *w - lr * g;
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Bias-corrected Adam update at step `t ≥ 1`.
pub fn adam_step<T: Scalar>(spec: &OptimizerSpec, moments: &mut Moments<T>, weights: &mut [T], grad: &[T], t: u64) {
    debug_assert!(t >= 1);
    let (b1, b2) = (spec.beta1, spec.beta2);
    let c1 = T::of(1.0 / (1.0 - b1.powf(t as f64)));
    let c2 = T::of(1.0 / (1.0 - b2.powf(t as f64)));
    let (b1, b2) = (T::of(b1), T::of(b2));
    let (one, lr, eps) = (T::one(), T::of(spec.learning_rate), T::of(spec.eps_hat));
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for (((w, &g), m), v) in weights.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m * c1;
        let v_hat = *v * c2;
        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state for one network: step count and per-tensor moments.
///
/// Tensor order is `weights, bias` for each parametric layer in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub spec: OptimizerSpec,
    /// Updates applied by this optimizer (drives Adam's bias correction).
    pub t: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(spec: OptimizerSpec, net: &Network<T>) -> Self {
        let moments = match spec.kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => net
                .params()
                .iter()
                .flat_map(|p| [Moments::zeros(p.weights.shape()), Moments::zeros(p.bias.shape())])
                .collect(),
        };
        Optimizer { spec, t: 0, moments }
    }

    pub fn moments(&self) -> &[Moments<T>] {
        &self.moments
    }

    /// Replaces state, e.g. when resuming from a checkpoint.
    pub fn restore(&mut self, t: u64, moments: Vec<Moments<T>>) -> Result<()> {
        if moments.len() != self.moments.len()
            || moments
                .iter()
                .zip(&self.moments)
                .any(|(a, b)| a.m.shape() != b.m.shape() || a.v.shape() != b.v.shape())
        {
            return Err(Error::Config("optimizer state does not match the network".into()));
        }
        self.t = t;
        self.moments = moments;
        Ok(())
    }

    /// One update of every parameter. Weight tensors get the penalty gradient
    /// added; biases see the data gradient only.
    pub fn step(&mut self, net: &mut Network<T>, grads: Vec<ParamGrads<T>>, reg: &RegSpec) {
        self.t += 1;
        net.step_counter += 1;
        let t = self.t;
        let spec = self.spec;
        for (i, (p, g)) in net.params_mut().into_iter().zip(grads).enumerate() {
            let ParamGrads {
                weights: mut gw,
                bias: gb,
            } = g;
            reg.accumulate(p.weights.data(), gw.data_mut());
            match spec.kind {
                OptimizerKind::Sgd => {
                    sgd_step(spec.learning_rate, p.weights.data_mut(), gw.data());
                    sgd_step(spec.learning_rate, p.bias.data_mut(), gb.data());
                }
                OptimizerKind::Adam => {
                    let (mw, mb) = self.moments[2 * i..2 * i + 2].split_at_mut(1);
                    adam_step(&spec, &mut mw[0], p.weights.data_mut(), gw.data(), t);
                    adam_step(&spec, &mut mb[0], p.bias.data_mut(), gb.data(), t);
                }
            }
        }
    }
}
