mod support;

use proptest::prelude::*;
use wtonp::data::{load_mnist, minibatches, mnist_dir, read_idx, synth_blobs, Dataset, MNIST_VAL_SIZE};
use wtonp::metrics::error_rate;
use wtonp::optim::{Optimizer, OptimizerSpec, RegSpec};
use wtonp::prune::{train_step, GateStreams};

#[test]
fn official_mnist_counts() {
    let dir = mnist_dir();
    let train: Dataset<f32> =
        read_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    let test: Dataset<f32> = read_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!(train.len(), 60_000);
    assert_eq!(test.len(), 10_000);
    assert_eq!(train.sample_shape(), &[1, 28, 28]);
    assert!(train.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let splits = load_mnist::<f32>(&dir).unwrap();
    assert_eq!(splits.train.len(), 60_000 - MNIST_VAL_SIZE);
    assert_eq!(splits.val.as_ref().unwrap().len(), MNIST_VAL_SIZE);
}

#[test]
fn untrained_mlp_is_at_chance_on_mnist() {
    let splits = load_mnist::<f64>(&mnist_dir()).unwrap().reshape_samples(&[784]).unwrap();
    // a single init's error swings by ±0.04 with its arbitrary class bias
    let errors: Vec<f64> = (0..12)
        .map(|seed| {
            let mut net = support::mlp(&[784, 300, 100, 10]);
            net.init_weights(seed);
            error_rate(&net, &splits.test).unwrap()
        })
        .collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    assert!((mean - 0.9).abs() <= 0.02, "mean error {mean} over {errors:?}");
}

#[test]
fn linear_classifier_separates_tight_blobs() {
    let data = synth_blobs::<f64>(4, 100, 6, 0.1, 3);
    let mut net = support::mlp(&[6, 4]);
    net.init_weights(3);
    let mut opt = Optimizer::new(OptimizerSpec::adam(0.05), &net);
    let mut streams = GateStreams::new(3, &net);
    for epoch in 0..30 {
        for b in minibatches(data.len(), 20, epoch).unwrap() {
            let (x, y) = data.gather(&b);
            train_step(&mut net, &mut opt, &RegSpec::none(), None, &x, &y, &mut streams).unwrap();
        }
    }
    assert!(error_rate(&net, &data).unwrap() < 0.01);
}

proptest! {
    #[test]
    fn minibatches_cover_each_index_once(n in 1usize..500, bs in 1usize..64, seed: u64) {
        let bs = bs.min(n);
        let batches = minibatches(n, bs, seed).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().rev().skip(1).all(|b| b.len() == bs));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(minibatches(n, bs, seed).unwrap(), batches);
    }
}
