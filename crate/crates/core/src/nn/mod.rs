//! Layers with hand-written forward and backward passes.
//!
//! A [`Network`] is an ordered list of [`Layer`]s ending in a
//! softmax-cross-entropy head. Parametric layers (dense and conv) own a
//! [`LayerParams`]; everything that walks parameters (optimizers, gates,
//! metrics) goes through [`Network::params`] / [`Network::params_mut`], which
//! yield the parametric layers in network order.

mod conv;
mod ops;

use std::collections::HashSet;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use conv::{ConvGeometry, Padding};
pub use ops::{conv2d_forward, softmax_cross_entropy, LossAndGrad, ParamGrads};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Weights and bias of one parametric layer.
///
/// Dense weights are `in × out`; conv weights are `out × in × kH × kW`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub layer_id: String,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    /// Number of nodes this layer outputs: dense units or conv filters.
    pub fn num_nodes(&self) -> usize {
        match self.weights.rank() {
            2 => self.weights.shape()[1],
            _ => self.weights.shape()[0],
        }
    }

    /// Number of incoming connections per node.
    pub fn fan_in(&self) -> usize {
        match self.weights.rank() {
            2 => self.weights.shape()[0],
            _ => self.weights.len() / self.weights.shape()[0],
        }
    }

    pub fn is_conv(&self) -> bool {
        self.weights.rank() == 4
    }

    /// Incoming weights of `node` (a dense column or a conv filter).
    pub fn node_weights(&self, node: usize) -> Vec<T> {
        let w = self.weights.data();
        if self.is_conv() {
            let n = self.fan_in();
            w[node * n..(node + 1) * n].to_vec()
        } else {
            let out = self.num_nodes();
            w.iter().skip(node).step_by(out).copied().collect()
        }
    }

    /// Number of input units feeding this layer: dense inputs or conv input channels.
    pub fn num_inputs(&self) -> usize {
        match self.weights.rank() {
            2 => self.weights.shape()[0],
            _ => self.weights.shape()[1],
        }
    }

    /// Whether every outgoing weight of input unit `input` is zero.
    pub fn input_is_disconnected(&self, input: usize) -> bool {
        let w = self.weights.data();
        if self.is_conv() {
            let s = self.weights.shape();
            let (ic, k) = (s[1], s[2] * s[3]);
            (0..s[0]).all(|o| {
                let start = (o * ic + input) * k;
                w[start..start + k].iter().all(|x| x.is_zero())
            })
        } else {
            let out = self.num_nodes();
            w[input * out..(input + 1) * out].iter().all(|x| x.is_zero())
        }
    }
}

/// Serializable description of one layer; networks are built from a list of these.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        id: String,
        units: usize,
    },
    Conv2d {
        id: String,
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    MaxPool2d {
        #[serde(default)]
        id: String,
        size: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    Relu {
        #[serde(default)]
        id: String,
    },
    Flatten {
        #[serde(default)]
        id: String,
    },
    SoftmaxCrossEntropy {
        #[serde(default)]
        id: String,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dense(LayerParams<T>),
    Conv2d {
        params: LayerParams<T>,
        stride: usize,
        padding: Padding,
    },
    MaxPool2d {
        id: String,
        size: usize,
        stride: usize,
    },
    Relu {
        id: String,
    },
    Flatten {
        id: String,
    },
    SoftmaxCrossEntropy {
        id: String,
    },
}

impl<T: Scalar> Layer<T> {
    pub fn id(&self) -> &str {
        match self {
            Layer::Dense(p) | Layer::Conv2d { params: p, .. } => &p.layer_id,
            Layer::MaxPool2d { id, .. }
            | Layer::Relu { id }
            | Layer::Flatten { id }
            | Layer::SoftmaxCrossEntropy { id } => id,
        }
    }

    pub fn params(&self) -> Option<&LayerParams<T>> {
        match self {
            Layer::Dense(p) | Layer::Conv2d { params: p, .. } => Some(p),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut LayerParams<T>> {
        match self {
            Layer::Dense(p) | Layer::Conv2d { params: p, .. } => Some(p),
            _ => None,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(p) => LayerSpec::Dense {
                id: p.layer_id.clone(),
                units: p.num_nodes(),
            },
            Layer::Conv2d {
                params,
                stride,
                padding,
            } => LayerSpec::Conv2d {
                id: params.layer_id.clone(),
                filters: params.num_nodes(),
                kernel: params.weights.shape()[2],
                stride: *stride,
                padding: *padding,
            },
            Layer::MaxPool2d { id, size, stride } => LayerSpec::MaxPool2d {
                id: id.clone(),
                size: *size,
                stride: Some(*stride),
            },
            Layer::Relu { id } => LayerSpec::Relu { id: id.clone() },
            Layer::Flatten { id } => LayerSpec::Flatten { id: id.clone() },
            Layer::SoftmaxCrossEntropy { id } => LayerSpec::SoftmaxCrossEntropy { id: id.clone() },
        }
    }
}

/// Ordered layer stack plus the global update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    /// Number of parameter updates applied so far.
    pub step_counter: u64,
}

/// MLP-300-100 for 28×28 inputs flattened to 784 features.
pub fn mlp_300_100() -> (Vec<usize>, Vec<LayerSpec>) {
    let dense = |id: &str, units| LayerSpec::Dense {
        id: id.into(),
        units,
    };
    let relu = |id: &str| LayerSpec::Relu { id: id.into() };
    (
        vec![784],
        vec![
            dense("fc1", 300),
            relu("relu1"),
            dense("fc2", 100),
            relu("relu2"),
            dense("fc3", 10),
            LayerSpec::SoftmaxCrossEntropy { id: "head".into() },
        ],
    )
}

/// Small LeNet-style CNN for 1×28×28 inputs.
pub fn lenet_small() -> (Vec<usize>, Vec<LayerSpec>) {
    let conv = |id: &str, filters| LayerSpec::Conv2d {
        id: id.into(),
        filters,
        kernel: 5,
        stride: 1,
        padding: Padding::Valid,
    };
    let pool = |id: &str| LayerSpec::MaxPool2d {
        id: id.into(),
        size: 2,
        stride: None,
    };
    (
        vec![1, 28, 28],
        vec![
            conv("conv1", 6),
            LayerSpec::Relu { id: "relu1".into() },
            pool("pool1"),
            conv("conv2", 16),
            LayerSpec::Relu { id: "relu2".into() },
            pool("pool2"),
            LayerSpec::Flatten { id: "flatten".into() },
            LayerSpec::Dense {
                id: "fc1".into(),
                units: 100,
            },
            LayerSpec::Relu { id: "relu3".into() },
            LayerSpec::Dense {
                id: "fc2".into(),
                units: 10,
            },
            LayerSpec::SoftmaxCrossEntropy { id: "head".into() },
        ],
    )
}

impl<T: Scalar> Network<T> {
    /// Builds a network with zero parameters, checking that every layer's
    /// input shape matches what the previous layer produces.
    pub fn build(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Network(format!("invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let mut seen = HashSet::new();
        for (i, spec) in specs.iter().enumerate() {
            let layer = build_layer::<T>(spec, i, &shape)?;
            if !seen.insert(layer.id().to_string()) {
                return Err(Error::layer(layer.id(), "duplicate layer id"));
            }
            if matches!(layer, Layer::SoftmaxCrossEntropy { .. }) && i + 1 != specs.len() {
                return Err(Error::layer(layer.id(), "softmax head must be the last layer"));
            }
            shape = output_shape(&layer, &shape)?;
            layers.push(layer);
        }
        match layers.last() {
            Some(Layer::SoftmaxCrossEntropy { .. }) => {}
            _ => return Err(Error::Network("network must end with a softmax_cross_entropy head".into())),
        }
        if layers.iter().all(|l| l.params().is_none()) {
            return Err(Error::Network("network has no parametric layer".into()));
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            step_counter: 0,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.params().last().map_or(0, |p| p.num_nodes())
    }

    /// Parametric layers in network order.
    pub fn params(&self) -> Vec<&LayerParams<T>> {
        self.layers.iter().filter_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        self.layers.iter_mut().filter_map(Layer::params_mut).collect()
    }

    pub fn layer_params(&self, layer_id: &str) -> Option<&LayerParams<T>> {
        self.params().into_iter().find(|p| p.layer_id == layer_id)
    }

    pub fn layer_params_mut(&mut self, layer_id: &str) -> Option<&mut LayerParams<T>> {
        self.params_mut().into_iter().find(|p| p.layer_id == layer_id)
    }

    /// Total parameter count, biases included.
    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.weights.len() + p.bias.len()).sum()
    }

    /// Weight count, biases excluded.
    pub fn num_weights(&self) -> usize {
        self.params().iter().map(|p| p.weights.len()).sum()
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params_mut() {
            let (fan_in, fan_out) = if p.is_conv() {
                let s = p.weights.shape();
                let k = s[2] * s[3];
                (s[1] * k, s[0] * k)
            } else {
                let s = p.weights.shape();
                (s[0], s[1])
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for w in p.weights.data_mut() {
                *w = T::of(dist.sample(&mut rng));
            }
            p.bias.fill(T::zero());
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        if x.rank() < 2 || x.shape()[1..] != self.input_shape[..] {
            let id = self.layers[0].id();
            return Err(Error::layer(
                id,
                format!(
                    "input shape {:?} does not match expected [batch, {:?}]",
                    x.shape(),
                    self.input_shape
                ),
            ));
        }
        Ok(x.shape()[0])
    }

    /// Logits for a batch. Never mutates parameters.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut act = x.clone();
        for layer in &self.layers {
            act = ops::forward(layer, act, None)?;
        }
        Ok(act)
    }

    /// Mean softmax cross-entropy of a batch and its gradient with respect to
    /// every parameter tensor (data term only).
    pub fn loss_and_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<LossAndGrad<T>> {
        let batch = self.check_input(x)?;
        if labels.len() != batch {
            return Err(Error::Network(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        let classes = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Network(format!("label {bad} outside [0, {classes})")));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for layer in &self.layers {
            let mut cache = ops::Cache::None;
            act = ops::forward(layer, act, Some(&mut cache))?;
            caches.push(cache);
        }
        let (loss, correct, mut upstream) = softmax_cross_entropy(&act, labels);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                loss,
                step: self.step_counter,
            });
        }
        let mut grads = Vec::new();
        let first_param = self.layers.iter().position(|l| l.params().is_some());
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let need_input_grad = first_param.is_some_and(|f| i > f);
            let (down, g) = ops::backward(layer, cache, upstream, need_input_grad)?;
            if let Some(g) = g {
                grads.push(g);
            }
            match down {
                Some(d) => upstream = d,
                None => break,
            }
        }
        grads.reverse();
        Ok(LossAndGrad {
            loss,
            correct,
            grads,
        })
    }
}

fn build_layer<T: Scalar>(spec: &LayerSpec, index: usize, shape: &[usize]) -> Result<Layer<T>> {
    let auto = |id: &String, kind: &str| {
        if id.is_empty() {
            format!("{kind}{index}")
        } else {
            id.clone()
        }
    };
    Ok(match spec {
        LayerSpec::Dense { id, units } => {
            let [fan_in] = shape else {
                return Err(Error::layer(id, format!("dense layer needs a flat input, got {shape:?}")));
            };
            if *units == 0 || id.is_empty() {
                return Err(Error::layer(id, "dense layer needs an id and units > 0"));
            }
            Layer::Dense(LayerParams {
                layer_id: id.clone(),
                weights: Tensor::zeros([*fan_in, *units]),
                bias: Tensor::zeros([*units]),
            })
        }
        LayerSpec::Conv2d {
            id,
            filters,
            kernel,
            stride,
            padding,
        } => {
            let [channels, _, _] = shape else {
                return Err(Error::layer(id, format!("conv layer needs C×H×W input, got {shape:?}")));
            };
            if *filters == 0 || *kernel == 0 || *stride == 0 || id.is_empty() {
                return Err(Error::layer(id, "conv layer needs an id and positive filters/kernel/stride"));
            }
            Layer::Conv2d {
                params: LayerParams {
                    layer_id: id.clone(),
                    weights: Tensor::zeros([*filters, *channels, *kernel, *kernel]),
                    bias: Tensor::zeros([*filters]),
                },
                stride: *stride,
                padding: *padding,
            }
        }
        LayerSpec::MaxPool2d { id, size, stride } => {
            let stride = stride.unwrap_or(*size);
            if *size == 0 || stride == 0 {
                return Err(Error::layer(id, "pool size and stride must be positive"));
            }
            Layer::MaxPool2d {
                id: auto(id, "pool"),
                size: *size,
                stride,
            }
        }
        LayerSpec::Relu { id } => Layer::Relu { id: auto(id, "relu") },
        LayerSpec::Flatten { id } => Layer::Flatten {
            id: auto(id, "flatten"),
        },
        LayerSpec::SoftmaxCrossEntropy { id } => Layer::SoftmaxCrossEntropy {
            id: auto(id, "head"),
        },
    })
}

/// Per-sample output shape of `layer` given its per-sample input shape.
fn output_shape<T: Scalar>(layer: &Layer<T>, shape: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Dense(p) => Ok(vec![p.num_nodes()]),
        Layer::Conv2d {
            params,
            stride,
            padding,
        } => {
            let k = params.weights.shape()[2];
            let g = ConvGeometry::new(shape[0], shape[1], shape[2], k, k, *stride, *padding)
                .ok_or_else(|| {
                    Error::layer(
                        &params.layer_id,
                        format!("kernel {k}×{k} larger than padded input {shape:?}"),
                    )
                })?;
            Ok(vec![params.num_nodes(), g.out_h, g.out_w])
        }
        Layer::MaxPool2d { id, size, stride } => {
            let [c, h, w] = shape else {
                return Err(Error::layer(id, format!("pooling needs C×H×W input, got {shape:?}")));
            };
            if size > h || size > w {
                return Err(Error::layer(id, format!("pool window {size} larger than input {shape:?}")));
            }
            Ok(vec![*c, (h - size) / stride + 1, (w - size) / stride + 1])
        }
        Layer::Relu { .. } => Ok(shape.to_vec()),
        Layer::Flatten { .. } => Ok(vec![shape.iter().product()]),
        Layer::SoftmaxCrossEntropy { id } => {
            if shape.len() != 1 {
                return Err(Error::layer(id, format!("head needs flat logits, got {shape:?}")));
            }
            Ok(shape.to_vec())
        }
    }
}
