//! Pixel-importance estimators and heatmap post-processing.
//!
//! Every estimator differentiates the signed class logit `S_c` (see
//! [`ClassScore`](crate::model::ClassScore)), never the sigmoid probability.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_dims, Grid, Image};
use crate::heatmap::{Heatmap, PostOp, Provenance};
use crate::model::TrainedModel;
use crate::nn::BackwardMode;
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Backprop,
    Deconvolution,
    Intgrad,
    IntgradBw,
    ExpectedGrad,
    Smoothgrad,
    SmoothgradSq,
    Random,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 8] = [
        EstimatorKind::Backprop,
        EstimatorKind::Deconvolution,
        EstimatorKind::Intgrad,
        EstimatorKind::IntgradBw,
        EstimatorKind::ExpectedGrad,
        EstimatorKind::Smoothgrad,
        EstimatorKind::SmoothgradSq,
        EstimatorKind::Random,
    ];

    /// Config and directory key.
    pub fn key(&self) -> &'static str {
        match self {
            EstimatorKind::Backprop => "backprop",
            EstimatorKind::Deconvolution => "deconvolution",
            EstimatorKind::Intgrad => "intgrad",
            EstimatorKind::IntgradBw => "intgrad_bw",
            EstimatorKind::ExpectedGrad => "expected_grad",
            EstimatorKind::Smoothgrad => "smoothgrad",
            EstimatorKind::SmoothgradSq => "smoothgrad_sq",
            EstimatorKind::Random => "random",
        }
    }

    /// Name used in report tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            EstimatorKind::Backprop => "Backpropagation",
            EstimatorKind::Deconvolution => "Deconvolution",
            EstimatorKind::Intgrad => "IntGrad",
            EstimatorKind::IntgradBw => "IntGradBW",
            EstimatorKind::ExpectedGrad => "ExpectedGrad",
            EstimatorKind::Smoothgrad => "SmoothGrad",
            EstimatorKind::SmoothgradSq => "SmoothGradSQ",
            EstimatorKind::Random => "Random",
        }
    }

    /// Path-integral methods, whose sign is flipped for class-0 predictions.
    pub fn is_path_method(&self) -> bool {
        matches!(
            self,
            EstimatorKind::Intgrad | EstimatorKind::IntgradBw | EstimatorKind::ExpectedGrad
        )
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown estimator {s:?}; expected one of {}",
                    EstimatorKind::ALL.map(|k| k.key()).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    Black,
    BlackAndWhite,
    TrainingSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorParams {
    /// Integration steps for Integrated Gradients.
    pub steps: usize,
    /// Noise samples for SmoothGrad.
    pub noise_samples: usize,
    /// Noise standard deviation as a fraction of the [0, 1] intensity range.
    pub noise_sigma: f64,
    pub reference: ReferencePolicy,
    /// Monte-Carlo draws for Expected Gradients.
    pub reference_samples: usize,
    pub seed: u64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            steps: 25,
            noise_samples: 15,
            noise_sigma: 0.15,
            reference: ReferencePolicy::Black,
            reference_samples: 25,
            seed: 0,
        }
    }
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Param("interpolation steps m must be >= 1".into()));
        }
        if self.noise_samples == 0 {
            return Err(Error::Param("noise samples n must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Param("noise sigma must be >= 0".into()));
        }
        if self.reference_samples == 0 {
            return Err(Error::Param("reference sample count must be >= 1".into()));
        }
        Ok(())
    }
}

fn gradient(model: &TrainedModel, image: &Image, class: u8, mode: BackwardMode) -> Result<Vec<f64>> {
    Ok(model.score_gradient(image, class, mode)?.into_data())
}

fn check_input(model: &TrainedModel, image: &Image) -> Result<()> {
    let side = model.config.input_side;
    if image.dims() != (side, side) {
        return Err(Error::Contract(format!(
            "image is {:?}, model expects {side}x{side}",
            image.dims()
        )));
    }
    Ok(())
}

fn heatmap(image: &Image, scores: Vec<f64>, provenance: Provenance) -> Result<Heatmap> {
    Ok(Heatmap::new(Grid::new(image.height(), image.width(), scores)?, provenance))
}

/// Plain input gradient of the class score.
pub fn backprop_saliency(model: &TrainedModel, image: &Image, class: u8) -> Result<Heatmap> {
    check_input(model, image)?;
    let g = gradient(model, image, class, BackwardMode::Standard)?;
    heatmap(image, g, Provenance::new("backprop", format!("class={class}")))
}

/// Deconvnet reconstruction of the class score back to input space.
pub fn deconvolution_saliency(model: &TrainedModel, image: &Image, class: u8) -> Result<Heatmap> {
    check_input(model, image)?;
    let g = gradient(model, image, class, BackwardMode::Deconvnet)?;
    heatmap(image, g, Provenance::new("deconvolution", format!("class={class}")))
}

/// Right-endpoint Riemann sum of the path integral from `baseline` to `image`.
fn path_integral(model: &TrainedModel, image: &Image, baseline: &Image, class: u8, steps: usize) -> Result<Vec<f64>> {
    check_dims(image, baseline, "integrated gradients baseline")?;
    let diff: Vec<f64> = image.data().iter().zip(baseline.data()).map(|(x, b)| x - b).collect();
    let mut acc = vec![0.0; image.len()];
    let mut point = baseline.clone();
    for k in 1..=steps {
        let t = k as f64 / steps as f64;
        for ((p, b), d) in point.data_mut().iter_mut().zip(baseline.data()).zip(&diff) {
            *p = b + t * d;
        }
        let g = gradient(model, &point, class, BackwardMode::Standard)?;
        for (a, gv) in acc.iter_mut().zip(&g) {
            *a += gv;
        }
    }
    let inv = 1.0 / steps as f64;
    Ok(acc.iter().zip(&diff).map(|(a, d)| d * a * inv).collect())
}

/// Integrated Gradients against a black reference, or the average of the
/// black- and white-reference maps for [`ReferencePolicy::BlackAndWhite`].
pub fn integrated_gradients(model: &TrainedModel, image: &Image, class: u8, params: &EstimatorParams) -> Result<Heatmap> {
    check_input(model, image)?;
    params.validate()?;
    let (h, w) = image.dims();
    let m = params.steps;
    match params.reference {
        ReferencePolicy::Black => {
            let e = path_integral(model, image, &Grid::filled(h, w, 0.0), class, m)?;
            heatmap(image, e, Provenance::new("intgrad", format!("class={class},m={m},reference=black")))
        }
        ReferencePolicy::BlackAndWhite => {
            let black = path_integral(model, image, &Grid::filled(h, w, 0.0), class, m)?;
            let white = path_integral(model, image, &Grid::filled(h, w, 1.0), class, m)?;
            let e = black.iter().zip(&white).map(|(a, b)| 0.5 * (a + b)).collect();
            heatmap(
                image,
                e,
                Provenance::new("intgrad_bw", format!("class={class},m={m},reference=black_and_white")),
            )
        }
        ReferencePolicy::TrainingSet => Err(Error::Param(
            "training-set references belong to expected_gradients".into(),
        )),
    }
}

/// Integrated Gradients against an arbitrary baseline.
pub fn integrated_gradients_from(model: &TrainedModel, image: &Image, baseline: &Image, class: u8, steps: usize) -> Result<Heatmap> {
    check_input(model, image)?;
    if steps == 0 {
        return Err(Error::Param("interpolation steps m must be >= 1".into()));
    }
    let e = path_integral(model, image, baseline, class, steps)?;
    heatmap(image, e, Provenance::new("intgrad", format!("class={class},m={steps},reference=custom")))
}

/// Monte-Carlo Expected Gradients over references drawn from `pool` and
/// uniform interpolation coefficients.
pub fn expected_gradients(
    model: &TrainedModel,
    image: &Image,
    class: u8,
    params: &EstimatorParams,
    pool: &[&Image],
) -> Result<Heatmap> {
    check_input(model, image)?;
    params.validate()?;
    if pool.is_empty() {
        return Err(Error::Param("expected gradients needs a nonempty reference pool".into()));
    }
    let mut acc = vec![0.0; image.len()];
    let mut point = image.clone();
    for j in 0..params.reference_samples {
        let mut rng = rng_for(params.seed, j as u64);
        let reference = pool[rng.random_range(0..pool.len())];
        check_dims(image, reference, "expected gradients reference")?;
        let alpha: f64 = rng.random();
        for ((p, x), r) in point.data_mut().iter_mut().zip(image.data()).zip(reference.data()) {
            *p = r + alpha * (x - r);
        }
        let g = gradient(model, &point, class, BackwardMode::Standard)?;
        for ((a, gv), (x, r)) in acc.iter_mut().zip(&g).zip(image.data().iter().zip(reference.data())) {
            *a += (x - r) * gv;
        }
    }
    let inv = 1.0 / params.reference_samples as f64;
    heatmap(
        image,
        acc.into_iter().map(|a| a * inv).collect(),
        Provenance::new(
            "expected_grad",
            format!("class={class},samples={},seed={}", params.reference_samples, params.seed),
        ),
    )
}

/// Gaussian noise draw `index` for SmoothGrad; indexed so samples can be
/// produced in any order.
fn noisy_copy(image: &Image, sigma: f64, seed: u64, index: u64) -> Image {
    let mut rng = rng_for(seed, index);
    image.map(|&v| {
        let z: f64 = StandardNormal.sample(&mut rng);
        v + sigma * z
    })
}

/// SmoothGrad, or Squared SmoothGrad when `squared` is set.
pub fn smoothgrad(model: &TrainedModel, image: &Image, class: u8, params: &EstimatorParams, squared: bool) -> Result<Heatmap> {
    check_input(model, image)?;
    params.validate()?;
    let mut acc = vec![0.0; image.len()];
    for j in 0..params.noise_samples {
        let noisy = if params.noise_sigma == 0.0 {
            image.clone()
        } else {
            noisy_copy(image, params.noise_sigma, params.seed, j as u64)
        };
        let g = gradient(model, &noisy, class, BackwardMode::Standard)?;
        for (a, gv) in acc.iter_mut().zip(&g) {
            *a += if squared { gv * gv } else { *gv };
        }
    }
    let inv = 1.0 / params.noise_samples as f64;
    let name = if squared { "smoothgrad_sq" } else { "smoothgrad" };
    heatmap(
        image,
        acc.into_iter().map(|a| a * inv).collect(),
        Provenance::new(
            name,
            format!(
                "class={class},n={},sigma={},seed={}",
                params.noise_samples, params.noise_sigma, params.seed
            ),
        ),
    )
}

/// I.i.d. Uniform(0, 1) scores.
pub fn random_baseline(height: usize, width: usize, seed: u64) -> Result<Heatmap> {
    let mut rng = rng_for(seed, 0);
    let scores = Grid::new(height, width, (0..height * width).map(|_| rng.random::<f64>()).collect())?;
    Ok(Heatmap::new(scores, Provenance::new("random", format!("seed={seed}"))))
}

/// Applies `ops` in order. `predicted_class` drives the targeted sign
/// inversion, which only touches path-method maps.
pub fn postprocess(heatmap: &Heatmap, ops: &[PostOp], predicted_class: u8) -> Heatmap {
    let mut out = heatmap.clone();
    let path_method = out
        .provenance
        .estimator
        .parse::<EstimatorKind>()
        .map(|k| k.is_path_method())
        .unwrap_or(false);
    for &op in ops {
        match op {
            PostOp::SignInvertIfClass0 => {
                if path_method && predicted_class == 0 {
                    out.scores.data_mut().iter_mut().for_each(|v| *v = -*v);
                    out.provenance.inverted = !out.provenance.inverted;
                }
            }
            PostOp::Absolute => out.scores.data_mut().iter_mut().for_each(|v| *v = v.abs()),
            PostOp::MinmaxNormalize => minmax_in_place(out.scores.data_mut()),
        }
        out.provenance.post.push(op);
    }
    out
}

/// Maps values affinely onto [0, 1]; a constant input becomes all zeros.
pub fn minmax_in_place(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for v in values.iter_mut() {
        *v = ((*v - lo) / span).clamp(0.0, 1.0);
    }
}

/// Runs estimator `kind` with the shared parameter set. `pool` is only
/// consulted by Expected Gradients.
pub fn compute(
    kind: EstimatorKind,
    model: &TrainedModel,
    image: &Image,
    class: u8,
    params: &EstimatorParams,
    pool: &[&Image],
) -> Result<Heatmap> {
    match kind {
        EstimatorKind::Backprop => backprop_saliency(model, image, class),
        EstimatorKind::Deconvolution => deconvolution_saliency(model, image, class),
        EstimatorKind::Intgrad => integrated_gradients(
            model,
            image,
            class,
            &EstimatorParams {
                reference: ReferencePolicy::Black,
                ..params.clone()
            },
        ),
        EstimatorKind::IntgradBw => integrated_gradients(
            model,
            image,
            class,
            &EstimatorParams {
                reference: ReferencePolicy::BlackAndWhite,
                ..params.clone()
            },
        ),
        EstimatorKind::ExpectedGrad => expected_gradients(model, image, class, params, pool),
        EstimatorKind::Smoothgrad => smoothgrad(model, image, class, params, false),
        EstimatorKind::SmoothgradSq => smoothgrad(model, image, class, params, true),
        EstimatorKind::Random => random_baseline(image.height(), image.width(), params.seed),
    }
}
