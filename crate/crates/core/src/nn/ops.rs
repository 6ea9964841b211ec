use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{ConvGeometry, Layer, LayerParams};

/// Gradients of the data loss with respect to one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Result of one forward/backward pass over a minibatch.
#[derive(Debug, Clone)]
pub struct LossAndGrad<T> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Samples whose argmax logit equals the label.
    pub correct: usize,
    /// One entry per parametric layer, in network order.
    pub grads: Vec<ParamGrads<T>>,
}

/// What a layer keeps from its forward pass for the backward pass.
pub(super) enum Cache<T> {
    None,
    Dense(Tensor<T>),
    Conv {
        geom: ConvGeometry,
        batch: usize,
        cols: Vec<T>,
    },
    Pool {
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Relu(Tensor<T>),
    Flatten(Vec<usize>),
}

fn add_bias_rows<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let n = bias.len();
    for row in out.data_mut().chunks_exact_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o = *o + b;
        }
    }
}

pub(super) fn forward<T: Scalar>(
    layer: &Layer<T>,
    x: Tensor<T>,
    cache: Option<&mut Cache<T>>,
) -> Result<Tensor<T>> {
    match layer {
        Layer::Dense(p) => {
            let mut out = x
                .matmul(&p.weights)
                .map_err(|e| Error::layer(&p.layer_id, e.to_string()))?;
            add_bias_rows(&mut out, &p.bias);
            if let Some(c) = cache {
                *c = Cache::Dense(x);
            }
            Ok(out)
        }
        Layer::Conv2d {
            params,
            stride,
            padding,
        } => conv_forward(params, *stride, *padding, &x, cache),
        Layer::MaxPool2d { id, size, stride } => pool_forward(id, *size, *stride, &x, cache),
        Layer::Relu { .. } => {
            let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
            if let Some(c) = cache {
                *c = Cache::Relu(out.clone());
            }
            Ok(out)
        }
        Layer::Flatten { .. } => {
            let batch = x.shape()[0];
            let rest = x.len() / batch;
            if let Some(c) = cache {
                *c = Cache::Flatten(x.shape().to_vec());
            }
            x.into_shape([batch, rest])
        }
        Layer::SoftmaxCrossEntropy { .. } => Ok(x),
    }
}

/// Cross-correlation of a `B×C×H×W` batch with `params`, plus per-filter bias.
pub fn conv2d_forward<T: Scalar>(
    params: &LayerParams<T>,
    stride: usize,
    padding: super::Padding,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    conv_forward(params, stride, padding, x, None)
}

fn conv_geometry<T: Scalar>(
    params: &LayerParams<T>,
    stride: usize,
    padding: super::Padding,
    x: &Tensor<T>,
) -> Result<ConvGeometry> {
    let ws = params.weights.shape();
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != ws[1] {
        return Err(Error::layer(
            &params.layer_id,
            format!("expects [batch, {}, H, W] input, got {xs:?}", ws[1]),
        ));
    }
    ConvGeometry::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, padding).ok_or_else(|| {
        Error::layer(
            &params.layer_id,
            format!("kernel {}×{} larger than padded input {xs:?}", ws[2], ws[3]),
        )
    })
}

fn conv_forward<T: Scalar>(
    params: &LayerParams<T>,
    stride: usize,
    padding: super::Padding,
    x: &Tensor<T>,
    cache: Option<&mut Cache<T>>,
) -> Result<Tensor<T>> {
    let geom = conv_geometry(params, stride, padding, x)?;
    let batch = x.shape()[0];
    let filters = params.weights.shape()[0];
    let (patch, out_len, in_len) = (geom.patch_len(), geom.out_len(), geom.in_len());
    let mut cols = vec![T::zero(); batch * patch * out_len];
    let mut out = Tensor::zeros([batch, filters, geom.out_h, geom.out_w]);
    let w = params.weights.data();
    for b in 0..batch {
        let col = &mut cols[b * patch * out_len..(b + 1) * patch * out_len];
        geom.im2col(&x.data()[b * in_len..(b + 1) * in_len], col);
        let dst = &mut out.data_mut()[b * filters * out_len..(b + 1) * filters * out_len];
        for (f, row) in dst.chunks_exact_mut(out_len).enumerate() {
            row.fill(params.bias.data()[f]);
        }
        T::gemm(
            filters,
            patch,
            out_len,
            T::one(),
            w,
            patch as isize,
            1,
            col,
            out_len as isize,
            1,
            T::one(),
            dst,
            out_len as isize,
            1,
        );
    }
    if let Some(c) = cache {
        *c = Cache::Conv { geom, batch, cols };
    }
    Ok(out)
}

fn pool_forward<T: Scalar>(
    id: &str,
    size: usize,
    stride: usize,
    x: &Tensor<T>,
    cache: Option<&mut Cache<T>>,
) -> Result<Tensor<T>> {
    let &[batch, c, h, w] = x.shape() else {
        return Err(Error::layer(id, format!("expects B×C×H×W input, got {:?}", x.shape())));
    };
    if size > h || size > w {
        return Err(Error::layer(id, format!("pool window {size} larger than input {:?}", x.shape())));
    }
    let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let mut out = Tensor::zeros([batch, c, oh, ow]);
    let mut argmax = vec![0usize; batch * c * oh * ow];
    let src = x.data();
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                // strict `>` keeps the first maximum in scan order
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    if let Some(cache) = cache {
        *cache = Cache::Pool {
            in_shape: x.shape().to_vec(),
            argmax,
        };
    }
    Ok(out)
}

/// Propagates `upstream` (dL/d output) through one layer. Returns dL/d input
/// (when requested) and parameter gradients for parametric layers.
pub(super) fn backward<T: Scalar>(
    layer: &Layer<T>,
    cache: Cache<T>,
    upstream: Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Option<ParamGrads<T>>)> {
    match (layer, cache) {
        (Layer::Dense(p), Cache::Dense(x)) => {
            let dw = x.t_matmul(&upstream)?;
            let n = p.bias.len();
            let mut db = Tensor::zeros([n]);
            for row in upstream.data().chunks_exact(n) {
                for (d, &u) in db.data_mut().iter_mut().zip(row) {
                    *d = *d + u;
                }
            }
            let dx = if need_input_grad {
                Some(upstream.matmul_t(&p.weights)?)
            } else {
                None
            };
            Ok((dx, Some(ParamGrads { weights: dw, bias: db })))
        }
        (Layer::Conv2d { params, .. }, Cache::Conv { geom, batch, cols }) => {
            let filters = params.weights.shape()[0];
            let (patch, out_len, in_len) = (geom.patch_len(), geom.out_len(), geom.in_len());
            let mut dw = Tensor::zeros(params.weights.shape().to_vec());
            let mut db = Tensor::zeros([filters]);
            let mut dx = need_input_grad.then(|| Tensor::zeros([batch, geom.channels, geom.in_h, geom.in_w]));
            let mut dcols = vec![T::zero(); patch * out_len];
            for b in 0..batch {
                let dout = &upstream.data()[b * filters * out_len..(b + 1) * filters * out_len];
                let col = &cols[b * patch * out_len..(b + 1) * patch * out_len];
                // dW += dOut · colsᵀ
                T::gemm(
                    filters,
                    out_len,
                    patch,
                    T::one(),
                    dout,
                    out_len as isize,
                    1,
                    col,
                    1,
                    out_len as isize,
                    T::one(),
                    dw.data_mut(),
                    patch as isize,
                    1,
                );
                for (f, row) in dout.chunks_exact(out_len).enumerate() {
                    let s = row.iter().fold(T::zero(), |a, &v| a + v);
                    db.data_mut()[f] = db.data()[f] + s;
                }
                if let Some(dx) = dx.as_mut() {
                    // dCols = Wᵀ · dOut
                    T::gemm(
                        patch,
                        filters,
                        out_len,
                        T::one(),
                        params.weights.data(),
                        1,
                        patch as isize,
                        dout,
                        out_len as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        out_len as isize,
                        1,
                    );
                    geom.col2im(&dcols, &mut dx.data_mut()[b * in_len..(b + 1) * in_len]);
                }
            }
            Ok((dx, Some(ParamGrads { weights: dw, bias: db })))
        }
        (Layer::MaxPool2d { .. }, Cache::Pool { in_shape, argmax }) => {
            let mut dx = Tensor::zeros(in_shape);
            for (&src, &g) in argmax.iter().zip(upstream.data()) {
                dx.data_mut()[src] = dx.data()[src] + g;
            }
            Ok((Some(dx), None))
        }
        (Layer::Relu { .. }, Cache::Relu(out)) => {
            let dx = out.zip_gate(&upstream);
            Ok((Some(dx), None))
        }
        (Layer::Flatten { .. }, Cache::Flatten(shape)) => Ok((Some(upstream.into_shape(shape)?), None)),
        (Layer::SoftmaxCrossEntropy { .. }, Cache::None) => Ok((Some(upstream), None)),
        (layer, _) => Err(Error::layer(layer.id(), "backward called without a matching forward cache")),
    }
}

impl<T: Scalar> Tensor<T> {
    /// ReLU backward: passes `upstream` where `self > 0`, zero elsewhere.
    fn zip_gate(&self, upstream: &Tensor<T>) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&o, &u)| if o > T::zero() { u } else { T::zero() })
            .collect();
        Tensor::new(self.shape().to_vec(), data).expect("same shape")
    }
}

/// Mean softmax cross-entropy of `logits` (`B×C`) against `labels`.
///
/// Returns `(loss, correct, dL/dlogits)`; argmax ties go to the lowest class.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, usize, Tensor<T>) {
    let classes = logits.shape()[1];
    let batch = labels.len();
    let inv_batch = 1.0 / batch as f64;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, (row, &y)) in logits.data().chunks_exact(classes).zip(labels).enumerate() {
        let (argmax, max) = row
            .iter()
            .map(|v| v.as_f64())
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, v)| if v > bv { (j, v) } else { (bi, bv) });
        if argmax == y {
            correct += 1;
        }
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += total.ln() - (row[y].as_f64() - max);
        let g = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (j, (gj, e)) in g.iter_mut().zip(&exps).enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            *gj = T::of((e / total - onehot) * inv_batch);
        }
    }
    (loss * inv_batch, correct, grad)
}
