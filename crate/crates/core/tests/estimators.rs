use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliency_core::estimators::{
    backprop_saliency, compute, expected_gradients, random_baseline, EstimatorKind, EstimatorParams,
};
use saliency_core::grid::{Grid, Image};
use saliency_core::model::{ModelConfig, TrainedModel, TrainingMeta};
use saliency_core::nn::{LayerSpec, Network};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn model(layers: Vec<LayerSpec>, side: usize, seed: u64) -> TrainedModel {
    let config = ModelConfig { input_side: side, layers: layers.clone(), ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::new(config.input_shape(), &layers[..layers.len() - 1], &mut rng).unwrap();
    let meta = TrainingMeta { seed, epochs_run: 0, final_loss: 0.0, train_balanced_accuracy: 0.0, test_balanced_accuracy: 0.0 };
    TrainedModel::from_network(config, net, meta).unwrap()
}

fn relu_model() -> TrainedModel {
    model(
        vec![
            LayerSpec::Conv2d { out_channels: 3, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d,
            LayerSpec::Dense { outputs: 4 },
            LayerSpec::Relu,
            LayerSpec::Dense { outputs: 1 },
            LayerSpec::Sigmoid,
        ],
        8,
        2,
    )
}

fn image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::from_fn(8, 8, |_, _| rng.random::<f64>())
}

#[test]
fn random_baseline_is_uniform() {
    let h = random_baseline(64, 64, 123).unwrap();
    let mean = h.data().iter().sum::<f64>() / h.data().len() as f64;
    assert!((mean - 0.5).abs() <= 0.02, "mean {mean}");
    let mut bins = [0usize; 10];
    for &v in h.data() {
        bins[((v * 10.0) as usize).min(9)] += 1;
    }
    let expected = h.data().len() as f64 / 10.0;
    let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi2 {chi2}, p {p}");
    assert_eq!(h, random_baseline(64, 64, 123).unwrap());
}

#[test]
fn class_zero_maps_negate_class_one_maps() {
    let m = relu_model();
    let x = image(1);
    let pool_images: Vec<Image> = (10..14).map(image).collect();
    let pool: Vec<&Image> = pool_images.iter().collect();
    for kind in EstimatorKind::ALL {
        if matches!(kind, EstimatorKind::Random | EstimatorKind::SmoothgradSq | EstimatorKind::Deconvolution) {
            continue;
        }
        let p = EstimatorParams::default();
        let a = compute(kind, &m, &x, 1, &p, &pool).unwrap();
        let b = compute(kind, &m, &x, 0, &p, &pool).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(*u, -*v, "{kind}");
        }
    }
}

#[test]
fn estimators_are_deterministic() {
    let m = relu_model();
    let x = image(2);
    let pool_images: Vec<Image> = (20..24).map(image).collect();
    let pool: Vec<&Image> = pool_images.iter().collect();
    let p = EstimatorParams { seed: 77, ..EstimatorParams::default() };
    for kind in EstimatorKind::ALL {
        assert_eq!(compute(kind, &m, &x, 1, &p, &pool).unwrap(), compute(kind, &m, &x, 1, &p, &pool).unwrap(), "{kind}");
    }
}

#[test]
fn rescaled_logit_keeps_the_ranking() {
    let m = relu_model();
    let x = image(3);
    let base = backprop_saliency(&m, &x, 1).unwrap();
    let mut params: Vec<Vec<f64>> = m.logit_network().parameters().iter().map(|p| p.to_vec()).collect();
    // Scaling the last dense layer by 4 scales the logit by 4.
    let last = params.len();
    for p in &mut params[last - 2..] {
        p.iter_mut().for_each(|v| *v *= 4.0);
    }
    let net = Network::with_parameters(m.config.input_shape(), &m.logit_network().specs(), params).unwrap();
    let scaled = TrainedModel::from_network(m.config.clone(), net, m.meta.clone()).unwrap();
    let s = backprop_saliency(&scaled, &x, 1).unwrap();
    let order = |v: &[f64]| {
        let mut i: Vec<usize> = (0..v.len()).collect();
        i.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        i
    };
    assert_eq!(order(base.data()), order(s.data()));
}

#[test]
fn expected_gradients_linear_and_self_reference() {
    let lin = model(vec![LayerSpec::Dense { outputs: 1 }, LayerSpec::Sigmoid], 8, 5);
    let w = lin.logit_network().parameters()[0].to_vec();
    let x = image(4);
    let zero = Grid::filled(8, 8, 0.0);
    let p = EstimatorParams { reference_samples: 40, seed: 3, ..EstimatorParams::default() };
    let h = expected_gradients(&lin, &x, 1, &p, &[&zero]).unwrap();
    for ((e, w), x) in h.data().iter().zip(&w).zip(x.data()) {
        assert!((e - w * x).abs() < 1e-12);
    }
    let own = expected_gradients(&relu_model(), &x, 1, &p, &[&x]).unwrap();
    assert!(own.data().iter().all(|&v| v == 0.0));
}
