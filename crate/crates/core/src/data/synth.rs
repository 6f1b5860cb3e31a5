//! Procedural "pseudo-CT" slices: a soft-tissue body ellipse, two dark lung
//! ellipses and a handful of vessel discs. Contrast-enhanced samples raise the
//! intensity inside the vessel discs, and the discs are the ground-truth mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, MaskImage};
use crate::rng::{child_seed, labeled_seed, rng_for};

/// Closed interval `[lo, hi]` that geometry values are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi <= self.lo {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub side: usize,
    /// Body semi-axes as fractions of the side length.
    pub body_semi_x: Range,
    pub body_semi_y: Range,
    /// Lung semi-axes as fractions of the body semi-axes.
    pub lung_semi_x: Range,
    pub lung_semi_y: Range,
    pub vessel_count: (usize, usize),
    /// Vessel radius in pixels.
    pub vessel_radius: Range,
    pub tissue_intensity: f64,
    pub lung_intensity: f64,
    pub vessel_intensity: f64,
    pub contrast_delta: f64,
    pub noise_sigma: f64,
    /// Masks outside this coverage band are redrawn.
    pub min_coverage: f64,
    pub max_coverage: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            side: 64,
            body_semi_x: Range::new(0.38, 0.46),
            body_semi_y: Range::new(0.28, 0.36),
            lung_semi_x: Range::new(0.30, 0.38),
            lung_semi_y: Range::new(0.55, 0.70),
            vessel_count: (2, 5),
            vessel_radius: Range::new(2.0, 5.0),
            tissue_intensity: 0.45,
            lung_intensity: 0.12,
            vessel_intensity: 0.5,
            contrast_delta: 0.35,
            noise_sigma: 0.02,
            min_coverage: 0.01,
            max_coverage: 0.11,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.side < 8 {
            return bad(format!("image side {} is too small", self.side));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be >= 0".into());
        }
        if !(self.contrast_delta > 3.0 * self.noise_sigma) {
            return bad(format!(
                "contrast delta {} must exceed 3x noise sigma {}",
                self.contrast_delta, self.noise_sigma
            ));
        }
        if self.vessel_count.0 == 0 || self.vessel_count.0 > self.vessel_count.1 {
            return bad(format!("bad vessel count range {:?}", self.vessel_count));
        }
        if !(self.vessel_radius.lo > 0.0) || self.vessel_radius.hi < self.vessel_radius.lo {
            return bad(format!("bad vessel radius range {:?}", self.vessel_radius));
        }
        if !(0.0..=1.0).contains(&self.min_coverage) || self.max_coverage < self.min_coverage {
            return bad("bad coverage band".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    /// Held-out samples used for attribution and evaluation.
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }

    pub fn is_held_out(&self) -> bool {
        !matches!(self, Split::Train)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: usize,
    pub image: Image,
    /// 1 when the contrast delta was applied.
    pub label: u8,
    pub mask: MaskImage,
    pub split: Split,
}

/// Split sizes; whatever is left after `train` and `eval` is `test`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: usize,
    pub eval: usize,
}

impl SplitPlan {
    /// 80% train, then up to 100 evaluation samples, the rest test.
    pub fn default_for(n: usize) -> Self {
        let train = n * 4 / 5;
        Self {
            train,
            eval: (n - train).min(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Test and eval samples together.
    pub fn held_out(&self) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(|s| s.split.is_held_out())
    }

    /// (label-0 count, label-1 count) within a split.
    pub fn class_counts(&self, split: Split) -> (usize, usize) {
        self.split(split).fold((0, 0), |(a, b), s| if s.label == 1 { (a, b + 1) } else { (a + 1, b) })
    }

    pub fn mean_mask_coverage(&self) -> f64 {
        self.samples.iter().map(|s| s.mask.coverage()).sum::<f64>() / self.samples.len().max(1) as f64
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.ax;
        let dy = (y - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }
}

struct Disc {
    cx: f64,
    cy: f64,
    r: f64,
}

/// Scene geometry independent of the label.
struct Scene {
    body: Ellipse,
    lungs: [Ellipse; 2],
    mask: MaskImage,
}

fn draw_scene(params: &SceneParams, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let s = params.side as f64;
    let body = Ellipse {
        cx: s * 0.5 + rng.random_range(-0.03..=0.03) * s,
        cy: s * 0.5 + rng.random_range(-0.03..=0.03) * s,
        ax: params.body_semi_x.sample(rng) * s,
        ay: params.body_semi_y.sample(rng) * s,
    };
    let lx = params.lung_semi_x.sample(rng) * body.ax;
    let ly = params.lung_semi_y.sample(rng) * body.ay;
    let offset = body.ax * 0.5;
    let lungs = [
        Ellipse { cx: body.cx - offset, cy: body.cy, ax: lx, ay: ly },
        Ellipse { cx: body.cx + offset, cy: body.cy, ax: lx, ay: ly },
    ];

    for _attempt in 0..200 {
        let count = rng.random_range(params.vessel_count.0..=params.vessel_count.1);
        let mut discs = Vec::with_capacity(count);
        for _ in 0..count {
            let r = params.vessel_radius.sample(rng);
            let (sx, sy) = (body.ax - r, body.ay - r);
            if sx <= 0.0 || sy <= 0.0 {
                return Err(Error::Generation(format!(
                    "vessel radius {r:.2} does not fit in body ellipse {:.2}x{:.2}",
                    body.ax, body.ay
                )));
            }
            // Uniform point in the shrunken ellipse, so the disc stays inside the body.
            let (cx, cy) = loop {
                let u: f64 = rng.random_range(-1.0..=1.0);
                let v: f64 = rng.random_range(-1.0..=1.0);
                if u * u + v * v <= 1.0 {
                    break (body.cx + u * sx, body.cy + v * sy);
                }
            };
            discs.push(Disc { cx, cy, r });
        }
        let mask = Grid::from_fn(params.side, params.side, |row, col| {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            discs.iter().any(|d| {
                let (dx, dy) = (x - d.cx, y - d.cy);
                dx * dx + dy * dy <= d.r * d.r
            })
        });
        let cov = mask.coverage();
        if cov >= params.min_coverage && cov <= params.max_coverage {
            return Ok(Scene { body, lungs, mask });
        }
    }
    Err(Error::Generation(format!(
        "could not place vessels with mask coverage in [{}, {}]",
        params.min_coverage, params.max_coverage
    )))
}

/// Renders the scene with seed `scene_seed`. Both labels share geometry and
/// noise; they differ only by the contrast delta inside the mask (before the
/// final clamp to [0, 1]).
pub fn render_scene(params: &SceneParams, scene_seed: u64, label: u8) -> Result<(Image, MaskImage)> {
    params.validate()?;
    if label > 1 {
        return Err(Error::Param(format!("label must be 0 or 1, got {label}")));
    }
    let mut geo_rng = rng_for(scene_seed, 0);
    let scene = draw_scene(params, &mut geo_rng)?;
    let mut noise_rng = rng_for(scene_seed, 1);
    let noise = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::Param(e.to_string()))?;
    let delta = if label == 1 { params.contrast_delta } else { 0.0 };
    let side = params.side;
    let mut pixels = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let base = if *scene.mask.get(row, col) {
                params.vessel_intensity + delta
            } else if scene.lungs.iter().any(|l| l.contains(x, y)) {
                params.lung_intensity
            } else if scene.body.contains(x, y) {
                params.tissue_intensity
            } else {
                0.0
            };
            let n = if params.noise_sigma > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            pixels.push((base + n).clamp(0.0, 1.0));
        }
    }
    Ok((Grid::new(side, side, pixels)?, scene.mask))
}

/// Generates `n` samples, a `balance` fraction of them contrast-enhanced,
/// split per [`SplitPlan::default_for`].
pub fn generate_dataset(params: &SceneParams, n: usize, balance: f64) -> Result<Dataset> {
    generate_dataset_with_split(params, n, balance, SplitPlan::default_for(n))
}

pub fn generate_dataset_with_split(params: &SceneParams, n: usize, balance: f64, plan: SplitPlan) -> Result<Dataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Param("dataset size must be > 0".into()));
    }
    if !(balance > 0.0 && balance < 1.0) {
        return Err(Error::Param(format!("balance must lie in (0, 1), got {balance}")));
    }
    if plan.train + plan.eval > n {
        return Err(Error::Param(format!("split plan {plan:?} exceeds {n} samples")));
    }
    // Exactly round(n * balance) positives, in a seeded random order.
    let positives = ((n as f64) * balance).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| (i < positives) as u8).collect();
    let mut label_rng = rng_for(labeled_seed(params.seed, "labels"), 0);
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut label_rng);

    let scene_root = labeled_seed(params.seed, "scenes");
    let samples = (0..n)
        .into_par_iter()
        .map(|id| {
            let (image, mask) = render_scene(params, child_seed(scene_root, id as u64), labels[id])?;
            let split = if id < plan.train {
                Split::Train
            } else if id < plan.train + plan.eval {
                Split::Eval
            } else {
                Split::Test
            };
            Ok(LabeledSample {
                id,
                image,
                label: labels[id],
                mask,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SceneParams {
        SceneParams {
            noise_sigma: 0.0,
            ..SceneParams::default()
        }
    }

    #[test]
    fn paired_scenes_differ_by_delta_inside_mask() {
        let p = quiet();
        for seed in 0..20 {
            let (with, mask) = render_scene(&p, seed, 1).unwrap();
            let (without, mask0) = render_scene(&p, seed, 0).unwrap();
            assert_eq!(mask, mask0);
            for i in 0..with.len() {
                let d = with.data()[i] - without.data()[i];
                if mask.data()[i] {
                    assert!((d - 0.35).abs() < 1e-12, "inside mask diff {d}");
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }

    #[test]
    fn noisy_pairs_share_noise_outside_mask() {
        let p = SceneParams::default();
        let (a, mask) = render_scene(&p, 11, 1).unwrap();
        let (b, _) = render_scene(&p, 11, 0).unwrap();
        for i in 0..a.len() {
            if !mask.data()[i] {
                assert_eq!(a.data()[i], b.data()[i]);
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let p = SceneParams { seed: 5, ..SceneParams::default() };
        let a = generate_dataset(&p, 40, 0.5).unwrap();
        let b = generate_dataset(&p, 40, 0.5).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&SceneParams { seed: 6, ..p }, 40, 0.5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn coverage_band_and_class_balance() {
        let ds = generate_dataset(&SceneParams::default(), 200, 0.5).unwrap();
        for s in &ds.samples {
            let c = s.mask.coverage();
            assert!((0.01..=0.11).contains(&c), "coverage {c}");
        }
        let ones = ds.samples.iter().filter(|s| s.label == 1).count();
        assert_eq!(ones, 100);
        assert_eq!(ds.split(Split::Train).count(), 160);
        assert_eq!(ds.split(Split::Eval).count(), 40);
        assert_eq!(ds.split(Split::Test).count(), 0);
    }

    #[test]
    fn mean_intensity_inside_mask_separates_classes() {
        let ds = generate_dataset(&SceneParams::default(), 300, 0.5).unwrap();
        let threshold = 0.5 + 0.35 / 2.0;
        let correct = ds
            .samples
            .iter()
            .filter(|s| {
                let inside: Vec<f64> = s
                    .image
                    .data()
                    .iter()
                    .zip(s.mask.data())
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .collect();
                let mean = inside.iter().sum::<f64>() / inside.len() as f64;
                (mean > threshold) == (s.label == 1)
            })
            .count();
        assert!(correct as f64 / 300.0 >= 0.99);
    }

    #[test]
    fn infeasible_geometry_is_reported() {
        let p = SceneParams {
            vessel_radius: Range::new(40.0, 41.0),
            ..SceneParams::default()
        };
        assert!(matches!(render_scene(&p, 0, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn parameter_validation() {
        assert!(generate_dataset(&SceneParams::default(), 0, 0.5).is_err());
        assert!(generate_dataset(&SceneParams::default(), 10, 1.0).is_err());
        let weak = SceneParams {
            contrast_delta: 0.05,
            noise_sigma: 0.02,
            ..SceneParams::default()
        };
        assert!(weak.validate().is_err());
    }
}
