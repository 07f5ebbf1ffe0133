//! Training-dynamics checks: loss decrease on a separable toy problem,
//! bit-exact optimizer determinism, and finiteness of full passes.

use npdk_core::arch::{build_compact_classifier, Network};
use npdk_core::nn::{softmax_cross_entropy, FcLayer};
use npdk_core::optim::Optimizer;
use npdk_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two linearly separable clusters for a softmax regression.
fn toy_set() -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n_per = 20;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2usize {
        let (mx, my) = if class == 0 { (-2.0, -1.0) } else { (2.0, 1.0) };
        for _ in 0..n_per {
            data.push(mx + rng.gen_range(-0.5..0.5));
            data.push(my + rng.gen_range(-0.5..0.5));
            labels.push(class);
        }
    }
    (
        Tensor::from_vec(&[2 * n_per, 2], data).unwrap(),
        labels,
    )
}

#[test]
fn sgdm_cuts_toy_cross_entropy_by_ninety_percent_in_200_steps() {
    let (inputs, labels) = toy_set();
    let mut layer = FcLayer::new(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in layer.weights.data_mut() {
        *v = rng.gen_range(-0.1..0.1);
    }
    let mut opt = Optimizer::sgdm(0.1, 0.9);
    let mut initial = None;
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let (logits, cache) = layer.forward(&inputs).unwrap();
        let (loss, grad_logits) = softmax_cross_entropy(&logits, &labels).unwrap();
        initial.get_or_insert(loss);
        last = loss;
        let (_, grads) = layer.backward(&cache, &grad_logits).unwrap();
        let mut params: Vec<&mut Tensor> = vec![&mut layer.weights, &mut layer.bias];
        opt.step(&mut params, &[&grads.weights, &grads.bias]).unwrap();
    }
    let initial = initial.unwrap();
    assert!(
        last <= 0.1 * initial,
        "loss only fell from {initial} to {last}"
    );
}

#[test]
fn identical_seeds_produce_bit_identical_parameters() {
    let run = || {
        let spec = build_compact_classifier(64, 3, &[2, 2, 4, 4, 4, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut net = Network::initialize(spec, &mut rng).unwrap();
        let mut opt = Optimizer::sgdm(0.01, 0.9);
        let mut data_rng = ChaCha8Rng::seed_from_u64(456);
        for _step in 0..3 {
            let mut batch = Tensor::zeros(&[2, 3, 64, 64]);
            for v in batch.data_mut() {
                *v = data_rng.gen_range(0.0..1.0);
            }
            let labels = vec![0usize, 2];
            let (logits, cache) = net.forward_train(&batch).unwrap();
            let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
            let (_, grads) = net.backward(&cache, &grad).unwrap();
            let flat = grads.flat();
            let mut params = net.parameters_mut();
            opt.step(&mut params, &flat).unwrap();
        }
        let bytes: Vec<u8> = net
            .parameters()
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        bytes
    };
    assert_eq!(run(), run());
}

#[test]
fn forward_and_backward_stay_finite_on_finite_inputs() {
    let spec = build_compact_classifier(64, 4, &[3, 3, 5, 5, 6, 6]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Network::initialize(spec, &mut rng).unwrap();
    let mut batch = Tensor::zeros(&[3, 3, 64, 64]);
    for v in batch.data_mut() {
        *v = rng.gen_range(-3.0..3.0);
    }
    let (logits, cache) = net.forward_train(&batch).unwrap();
    assert!(logits.is_all_finite());
    let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
    assert!(loss.is_finite());
    let (gin, grads) = net.backward(&cache, &grad).unwrap();
    assert!(gin.is_all_finite());
    for g in grads.flat() {
        assert!(g.is_all_finite());
    }
}
