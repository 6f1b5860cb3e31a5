mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliency_core::nn::{finite_difference_gradient, BackwardMode, LayerSpec, Network, Tensor};

#[test]
fn backward_matches_finite_differences_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut stats = common::OracleStats::default();
    for _ in 0..100 {
        let (net, x) = common::random_case(&mut rng);
        stats.merge(common::gradient_check(&net, &x, None, 1e-5).unwrap());
    }
    assert!(stats.max_rel_err < 1e-4, "{stats:?}");
    assert!(stats.excluded_fraction() < 0.05, "{stats:?}");
}

#[test]
fn finite_difference_examples() {
    let dense = Network::with_parameters(vec![1], &[LayerSpec::Dense { outputs: 1 }], vec![vec![3.0], vec![0.0]]).unwrap();
    let g = finite_difference_gradient(&dense, &Tensor::new(vec![1], vec![1.0]).unwrap(), &Tensor::scalar(1.0), 1e-5).unwrap();
    assert!((g.data()[0] - 3.0).abs() < 1e-9);

    let sig = Network::zeroed(vec![1], &[LayerSpec::Sigmoid]).unwrap();
    let g = finite_difference_gradient(&sig, &Tensor::new(vec![1], vec![0.0]).unwrap(), &Tensor::scalar(1.0), 1e-5).unwrap();
    assert!((g.data()[0] - 0.25).abs() < 1e-8);
}

/// Positive weights and inputs keep every relu input and every backward
/// signal positive, which is where the two modes must agree.
#[test]
fn deconvnet_equals_standard_when_all_signals_are_positive() {
    let specs = [
        LayerSpec::Conv2d { out_channels: 3, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d,
        LayerSpec::Conv2d { out_channels: 2, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::Dense { outputs: 3 },
        LayerSpec::Relu,
        LayerSpec::Dense { outputs: 1 },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let random = Network::new(vec![1, 8, 8], &specs, &mut rng).unwrap();
        let params: Vec<Vec<f64>> = random
            .parameters()
            .iter()
            .map(|p| p.iter().map(|v| v.abs() + 0.01).collect())
            .collect();
        let net = Network::with_parameters(vec![1, 8, 8], &specs, params).unwrap();
        let x = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
        let (_, tape) = net.forward(&x).unwrap();
        let a = tape.backward(&Tensor::scalar(1.0), BackwardMode::Standard).unwrap();
        let b = tape.backward(&Tensor::scalar(1.0), BackwardMode::Deconvnet).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn forward_is_bit_identical_and_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (net, x) = common::random_case(&mut rng);
        let big = x.scale(1e3);
        for input in [&x, &big] {
            let (a, ta) = net.forward(input).unwrap();
            let (b, tb) = net.forward(input).unwrap();
            assert_eq!(a.data(), b.data());
            for mode in [BackwardMode::Standard, BackwardMode::Deconvnet] {
                let ga = ta.backward(&Tensor::scalar(1.0), mode).unwrap();
                assert_eq!(ga, tb.backward(&Tensor::scalar(1.0), mode).unwrap());
                assert!(ga.is_finite());
            }
        }
    }
}
