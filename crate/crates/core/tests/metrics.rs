use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliency_core::data::{LabeledSample, Split};
use saliency_core::grid::{Grid, MaskImage};
use saliency_core::heatmap::{Heatmap, Provenance};
use saliency_core::metrics::{
    dsc, dsc_curve, fidelity, fraction_grid, masked_count, perturbation_curves, pixel_ranking, roc_curve_mean,
    xrai_top_percent, PerturbationCurve, RankOrder, ScoreNormalization, DEFAULT_PERCENT_GRID,
};
use saliency_core::model::{ModelConfig, TrainedModel, TrainingMeta};
use saliency_core::nn::{LayerSpec, Network};
use saliency_core::segmentation::{felzenszwalb_segment, region_mean_scores, FelzParams, RankedRegions, RegionMap, RegionStat};

fn heat(g: Grid<f64>) -> Heatmap {
    Heatmap::new(g, Provenance::new("t", ""))
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = MaskImage> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| Grid::new(h, w, v).unwrap())
}

proptest! {
    #[test]
    fn fidelity_is_antisymmetric(a in prop::collection::vec(0.0f64..1.0, 41), b in prop::collection::vec(0.0f64..1.0, 41)) {
        let c = |acc: Vec<f64>, order| PerturbationCurve { order, fractions: fraction_grid(40), accuracy: acc };
        let (m, l) = (c(a, RankOrder::Mif), c(b, RankOrder::Lif));
        prop_assert_eq!(fidelity(&m, &l).unwrap(), -fidelity(&l, &m).unwrap());
    }

    #[test]
    fn dsc_is_symmetric_and_one_only_for_identical(x in mask_strategy(4, 5), y in mask_strategy(4, 5)) {
        let d = dsc(&x, &y).unwrap();
        prop_assert_eq!(d, dsc(&y, &x).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        if x.count() + y.count() > 0 {
            prop_assert_eq!(d == 1.0, x == y);
        }
    }

    #[test]
    fn mif_and_lif_prefixes_cover_the_image(scores in prop::collection::vec(-3.0f64..3.0, 1..200), j in 0usize..=40) {
        let n = scores.len();
        let mif = pixel_ranking(&scores, RankOrder::Mif);
        let lif = pixel_ranking(&scores, RankOrder::Lif);
        let covered: HashSet<usize> = mif[..masked_count(j, 40, n)].iter().chain(&lif[..masked_count(40 - j, 40, n)]).copied().collect();
        prop_assert_eq!(covered.len(), n);
    }

    #[test]
    fn xrai_share_is_bounded(sizes in prop::collection::vec(1usize..30, 1..12), perm_seed in any::<u64>(), p in 0.5f64..100.0) {
        let labels: Vec<u32> = sizes.iter().enumerate().flat_map(|(i, &s)| std::iter::repeat_n(i as u32, s)).collect();
        let total = labels.len();
        let map = RegionMap { labels: Grid::new(1, total, labels).unwrap(), sizes: sizes.clone() };
        let mut order: Vec<u32> = (0..sizes.len() as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let ranked = RankedRegions { order, stats: sizes.iter().map(|&s| RegionStat { mean: 0.0, pixels: s }).collect() };
        let share = xrai_top_percent(&ranked, &map, p).unwrap().count() as f64 / total as f64;
        let largest = *sizes.iter().max().unwrap() as f64 / total as f64;
        prop_assert!(share >= p / 100.0 - 1e-12);
        prop_assert!(share < p / 100.0 + largest);
    }

    #[test]
    fn rank_roc_is_invariant_under_increasing_maps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heats: Vec<Heatmap> = (0..4).map(|_| heat(Grid::from_fn(6, 6, |_, _| rng.random::<f64>()))).collect();
        let shifted: Vec<Heatmap> = heats.iter().map(|h| heat(h.scores.map(|v| 2.0 * v + 5.0))).collect();
        let masks: Vec<MaskImage> = (0..4).map(|i| Grid::from_fn(6, 6, |r, c| (r + c + i) % 5 == 0)).collect();
        let mrefs: Vec<&MaskImage> = masks.iter().collect();
        let a = roc_curve_mean(&heats, &mrefs, 101, ScoreNormalization::Rank).unwrap();
        let b = roc_curve_mean(&shifted, &mrefs, 101, ScoreNormalization::Rank).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn toy_model() -> TrainedModel {
    let layers = vec![
        LayerSpec::Conv2d { out_channels: 2, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d,
        LayerSpec::Dense { outputs: 1 },
        LayerSpec::Sigmoid,
    ];
    let config = ModelConfig { input_side: 8, layers: layers.clone(), ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Network::new(config.input_shape(), &layers[..layers.len() - 1], &mut rng).unwrap();
    let meta = TrainingMeta { seed: 4, epochs_run: 0, final_loss: 0.0, train_balanced_accuracy: 0.0, test_balanced_accuracy: 0.0 };
    TrainedModel::from_network(config, net, meta).unwrap()
}

fn toy_samples(n: usize) -> Vec<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    (0..n)
        .map(|id| LabeledSample {
            id,
            image: Grid::from_fn(8, 8, |_, _| rng.random::<f64>()),
            label: (id % 2) as u8,
            mask: Grid::from_fn(8, 8, |r, c| r < 2 && c < 2),
            split: Split::Eval,
        })
        .collect()
}

#[test]
fn perturbation_endpoints() {
    let model = toy_model();
    let samples = toy_samples(30);
    let refs: Vec<&LabeledSample> = samples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let heats: Vec<Heatmap> = refs.iter().map(|_| heat(Grid::from_fn(8, 8, |_, _| rng.random::<f64>()))).collect();
    let mif = perturbation_curves(&model, &refs, &heats, RankOrder::Mif, 40).unwrap();
    let lif = perturbation_curves(&model, &refs, &heats, RankOrder::Lif, 40).unwrap();
    let clean = model.balanced_accuracy(refs.iter().copied()).unwrap();
    assert_eq!(mif.accuracy.len(), 41);
    assert_eq!(mif.accuracy[0], clean);
    assert_eq!(lif.accuracy[0], clean);
    // Fully masked inputs are constant per label, whatever the order.
    assert_eq!(mif.accuracy[40], lif.accuracy[40]);
    let blank: Vec<LabeledSample> = samples
        .iter()
        .map(|s| LabeledSample { image: Grid::filled(8, 8, if s.label == 1 { 0.0 } else { 1.0 }), ..s.clone() })
        .collect();
    assert_eq!(mif.accuracy[40], model.balanced_accuracy(&blank).unwrap());
    assert!(mif.accuracy.iter().all(|a| (0.0..=1.0).contains(a)));

    let wrong = vec![heat(Grid::filled(4, 4, 0.0)); refs.len()];
    assert!(perturbation_curves(&model, &refs, &wrong, RankOrder::Mif, 40).is_err());
}

/// Bright discs on a dark background, segmented so that each disc is a
/// region, with the heatmap equal to the mask.
#[test]
fn mask_aligned_heatmap_reaches_high_dsc() {
    let centres = [(12.0, 14.0), (40.0, 20.0), (22.0, 48.0), (50.0, 50.0)];
    let inside = |r: usize, c: usize| centres.iter().any(|&(y, x)| (r as f64 - y).powi(2) + (c as f64 - x).powi(2) <= 16.0);
    let image = Grid::from_fn(64, 64, |r, c| if inside(r, c) { 0.9 } else { 0.2 });
    let mask = Grid::from_fn(64, 64, inside);
    let h = heat(mask.map(|&b| b as u8 as f64));
    let curve = dsc_curve(std::slice::from_ref(&h), &[&image], &[&mask], &FelzParams::default(), &DEFAULT_PERCENT_GRID).unwrap();
    assert!(curve.max_dsc >= 0.9, "{curve:?}");

    let regions = felzenszwalb_segment(&image, &FelzParams::default()).unwrap();
    let ranked = region_mean_scores(&regions, &h).unwrap();
    assert_eq!(xrai_top_percent(&ranked, &regions, 100.0).unwrap().count(), 64 * 64);
}
