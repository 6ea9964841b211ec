//! Oracles shared by the integration tests. Everything here is written
//! independently of the library code it checks.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use wtonp::nn::{LayerSpec, Network, Padding};
use wtonp::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn anon(kind: &str) -> LayerSpec {
    match kind {
        "relu" => LayerSpec::Relu { id: String::new() },
        "flatten" => LayerSpec::Flatten { id: String::new() },
        _ => LayerSpec::SoftmaxCrossEntropy { id: String::new() },
    }
}

pub fn mlp(sizes: &[usize]) -> Network<f64> {
    let mut specs = Vec::new();
    for (i, &units) in sizes[1..].iter().enumerate() {
        if i > 0 {
            specs.push(anon("relu"));
        }
        specs.push(LayerSpec::Dense {
            id: format!("fc{}", i + 1),
            units,
        });
    }
    specs.push(anon("head"));
    Network::build(&[sizes[0]], &specs).unwrap()
}

/// Random architecture with at most `max_params` parameters: either a
/// small MLP or conv → relu → (maxpool) → flatten → dense.
pub fn random_architecture(rng: &mut ChaCha8Rng, max_params: usize) -> (Vec<usize>, Vec<LayerSpec>) {
    loop {
        let (shape, specs) = if rng.gen_bool(0.5) {
            let depth = rng.gen_range(1..=3);
            let mut sizes = vec![rng.gen_range(2..=6)];
            for _ in 1..depth {
                sizes.push(rng.gen_range(2..=8));
            }
            sizes.push(rng.gen_range(2..=5));
            let mut specs = Vec::new();
            for (i, &units) in sizes[1..].iter().enumerate() {
                if i > 0 {
                    specs.push(anon("relu"));
                }
                specs.push(LayerSpec::Dense {
                    id: format!("fc{}", i + 1),
                    units,
                });
            }
            specs.push(anon("head"));
            (vec![sizes[0]], specs)
        } else {
            let c = rng.gen_range(1..=2);
            let hw = rng.gen_range(4..=7);
            let mut specs = vec![
                LayerSpec::Conv2d {
                    id: "conv1".into(),
                    filters: rng.gen_range(1..=3),
                    kernel: rng.gen_range(2..=3),
                    stride: rng.gen_range(1..=2),
                    padding: if rng.gen_bool(0.5) { Padding::Valid } else { Padding::Same },
                },
                anon("relu"),
            ];
            if rng.gen_bool(0.5) {
                specs.push(LayerSpec::Conv2d {
                    id: "conv2".into(),
                    filters: rng.gen_range(1..=3),
                    kernel: 2,
                    stride: 1,
                    padding: Padding::Same,
                });
            }
            if rng.gen_bool(0.5) {
                specs.push(LayerSpec::MaxPool2d {
                    id: String::new(),
                    size: 2,
                    stride: None,
                });
            }
            specs.push(anon("flatten"));
            specs.push(LayerSpec::Dense {
                id: "fc".into(),
                units: rng.gen_range(2..=4),
            });
            specs.push(anon("head"));
            (vec![c, hw, hw], specs)
        };
        if let Ok(net) = Network::<f64>::build(&shape, &specs) {
            if net.num_params() <= max_params {
                return (shape, specs);
            }
        }
    }
}

/// Mean cross-entropy from logits via log-sum-exp.
pub fn reference_loss(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub fn loss_at(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    reference_loss(&net.forward(x).unwrap(), labels)
}

/// Central difference of the loss with respect to one parameter, which is
/// `weights` (`bias = false`) or `bias` of parametric layer `layer`.
pub fn central_difference(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    layer: usize,
    bias: bool,
    index: usize,
    h: f64,
) -> f64 {
    let mut probe = net.clone();
    let slot = |n: &mut Network<f64>, v: f64| {
        let p = &mut n.params_mut()[layer];
        let t = if bias { &mut p.bias } else { &mut p.weights };
        t.data_mut()[index] = v;
    };
    let w0 = if bias {
        net.params()[layer].bias.data()[index]
    } else {
        net.params()[layer].weights.data()[index]
    };
    slot(&mut probe, w0 + h);
    let up = loss_at(&probe, x, labels);
    slot(&mut probe, w0 - h);
    let down = loss_at(&probe, x, labels);
    (up - down) / (2.0 * h)
}

/// Row/column scan: a dense input is pruned when its whole row is zero, an
/// output when its whole column is zero; a conv input channel when every
/// filter's slice for it is zero, a filter when all of it is zero.
/// Returns pruned and total node counts over input + every parametric layer.
pub fn brute_force_nodes(net: &Network<f64>) -> (usize, usize) {
    let params = net.params();
    let mut pruned = 0;
    let mut total = 0;
    let first = params[0];
    let s = first.weights.shape().to_vec();
    let w = first.weights.data();
    if s.len() == 2 {
        for i in 0..s[0] {
            total += 1;
            if (0..s[1]).all(|o| w[i * s[1] + o] == 0.0) {
                pruned += 1;
            }
        }
    } else {
        let k = s[2] * s[3];
        for c in 0..s[1] {
            total += 1;
            if (0..s[0]).all(|o| (0..k).all(|j| w[(o * s[1] + c) * k + j] == 0.0)) {
                pruned += 1;
            }
        }
    }
    for p in &params {
        let s = p.weights.shape();
        let w = p.weights.data();
        if s.len() == 2 {
            for o in 0..s[1] {
                total += 1;
                if (0..s[0]).all(|i| w[i * s[1] + o] == 0.0) {
                    pruned += 1;
                }
            }
        } else {
            let n = w.len() / s[0];
            for f in 0..s[0] {
                total += 1;
                if w[f * n..(f + 1) * n].iter().all(|&v| v == 0.0) {
                    pruned += 1;
                }
            }
        }
    }
    (pruned, total)
}

/// Scalar Adam, written out term by term.
pub struct ScalarAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        ScalarAdam {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, w: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let mhat = self.m / (1.0 - self.b1.powi(self.t));
        let vhat = self.v / (1.0 - self.b2.powi(self.t));
        w - self.lr * mhat / (vhat.sqrt() + self.eps)
    }
}

pub fn bits(net: &Network<f64>) -> Vec<u64> {
    net.params()
        .iter()
        .flat_map(|p| p.weights.data().iter().chain(p.bias.data()).map(|v| v.to_bits()))
        .collect()
}

pub fn random_inputs(rng: &mut ChaCha8Rng, batch: usize, shape: &[usize], classes: usize) -> (Tensor<f64>, Vec<usize>) {
    let mut full = vec![batch];
    full.extend_from_slice(shape);
    let n: usize = full.iter().product();
    let x = Tensor::new(full, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let labels = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    (x, labels)
}

/// `|a − b| / max(|a|, |b|, floor)`. The floor keeps exact-zero gradients
/// (dead units) from turning rounding noise into relative error.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between analytic gradients and central differences
/// (step 1e-5) over every parameter of a random network of ≤ 500 parameters.
pub fn gradient_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (shape, specs) = random_architecture(&mut r, 500);
    let mut net = Network::<f64>::build(&shape, &specs).unwrap();
    net.init_weights(seed);
    for p in net.params_mut() {
        for b in p.bias.data_mut() {
            *b = r.gen_range(-0.5..0.5);
        }
    }
    let batch = r.gen_range(1..=4);
    let (x, labels) = random_inputs(&mut r, batch, &shape, net.num_classes());
    let lg = net.loss_and_grad(&x, &labels).unwrap();
    let mut worst = 0.0f64;
    for (l, g) in lg.grads.iter().enumerate() {
        for (bias, t) in [(false, &g.weights), (true, &g.bias)] {
            for (i, &analytic) in t.data().iter().enumerate() {
                let numeric = central_difference(&net, &x, &labels, l, bias, i, 1e-5);
                worst = worst.max(relative_error(analytic, numeric));
            }
        }
    }
    worst
}

/// Worst |φ − tanh²(a·w/2)| over 1000 random (a, w) pairs, with `a` and
/// `|w|` log-uniform over several decades.
pub fn gate_identity_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..1000)
        .map(|_| {
            let a = 10f64.powf(r.gen_range(-3.0..3.0));
            let w = 10f64.powf(r.gen_range(-4.0..1.0)) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            let gate = wtonp::prune::GateSpec::sigmoid(a);
            (wtonp::prune::gate_prob(&gate, w) - (a * w / 2.0).tanh().powi(2)).abs()
        })
        .fold(0.0, f64::max)
}

/// |w| at which the sigmoid gate with slope `a` keeps with probability ½:
/// tanh²(a|w|/2) = ½.
pub fn half_keep_weight(a: f64) -> f64 {
    2.0 * (0.5f64.sqrt()).atanh() / a
}

/// Kept fraction of `n` gates at φ = ½.
pub fn half_gate_kept_fraction(n: usize, seed: u64) -> f64 {
    let gate = wtonp::prune::GateSpec::sigmoid(1.0);
    let w = Tensor::full([n], half_keep_weight(1.0));
    let mask = wtonp::prune::sample_mask(&gate, &w, &mut rng(seed));
    mask.kept() as f64 / n as f64
}

/// Runs `steps` gated steps with a keep-all gate and no penalty next to
/// plain optimizer steps on a clone; true when every parameter matches bit
/// for bit after each step.
pub fn keep_all_matches_plain(seed: u64, spec: wtonp::optim::OptimizerSpec, steps: usize) -> bool {
    use wtonp::optim::{Optimizer, RegSpec};
    use wtonp::prune::{wtonp_step, GateSpec, GateStreams};
    let mut r = rng(seed);
    let (shape, specs) = random_architecture(&mut r, 1000);
    let mut gated = Network::<f64>::build(&shape, &specs).unwrap();
    gated.init_weights(seed);
    let mut plain = gated.clone();
    let mut gated_opt = Optimizer::new(spec, &gated);
    let mut plain_opt = Optimizer::new(spec, &plain);
    let mut streams = GateStreams::new(seed, &gated);
    for _ in 0..steps {
        let (x, labels) = random_inputs(&mut r, 4, &shape, gated.num_classes());
        wtonp_step(&mut gated, &mut gated_opt, &RegSpec::none(), &GateSpec::keep_all(), &x, &labels, &mut streams)
            .unwrap();
        let lg = plain.loss_and_grad(&x, &labels).unwrap();
        plain_opt.step(&mut plain, lg.grads, &RegSpec::none());
        if bits(&gated) != bits(&plain) {
            return false;
        }
    }
    true
}

/// Random network with a random sparsity pattern: each weight is zeroed with
/// a probability drawn per network, biased towards heavy sparsity so that
/// whole rows and columns empty out.
pub fn random_sparse_network(r: &mut ChaCha8Rng) -> Network<f64> {
    let (shape, specs) = random_architecture(r, 300);
    let mut net = Network::<f64>::build(&shape, &specs).unwrap();
    net.init_weights(r.gen());
    let p: f64 = r.gen_range(0.0f64..1.0).sqrt();
    for layer in net.params_mut() {
        for w in layer.weights.data_mut() {
            if r.gen_bool(p) {
                *w = if r.gen_bool(0.5) { 0.0 } else { -0.0 };
            }
        }
    }
    net
}

/// Number of random sparsity patterns on which the library's node count
/// disagrees with [`brute_force_nodes`].
pub fn node_accounting_mismatches(patterns: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..patterns)
        .filter(|_| {
            let net = random_sparse_network(&mut r);
            let (pruned, total) = brute_force_nodes(&net);
            let f = wtonp::metrics::pruned_node_fraction(&net);
            let lib_pruned: usize = f.per_layer.iter().map(|l| l.pruned).sum();
            let lib_total: usize = f.per_layer.iter().map(|l| l.total).sum();
            lib_pruned != pruned || lib_total != total || f.global != pruned as f64 / total as f64
        })
        .count()
}
