//! Evaluation metrics: perturbation fidelity, mask ROC, region-overlap DSC.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{csv_err, LabeledSample};
use crate::error::{Error, Result};
use crate::grid::{check_dims, Grid, MaskImage};
use crate::heatmap::Heatmap;
use crate::model::{balanced_accuracy, TrainedModel};
use crate::segmentation::{felzenszwalb_segment, region_mean_scores, FelzParams, RankedRegions, RegionMap};

/// Default number of perturbation steps (2.5% each).
pub const DEFAULT_FRACTION_STEPS: usize = 40;
pub const DEFAULT_THRESHOLD_COUNT: usize = 101;
pub const DEFAULT_PERCENT_GRID: [f64; 11] = [1.0, 2.0, 3.0, 4.0, 5.0, 7.5, 10.0, 15.0, 20.0, 30.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RankOrder {
    /// Most important first.
    Mif,
    /// Least important first.
    Lif,
}

/// Evenly spaced fractions `0, 1/steps, ..., 1`.
pub fn fraction_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|j| j as f64 / steps as f64).collect()
}

/// Pixels masked at step `j` of `steps`: `j * n / steps`, rounded half up.
pub fn masked_count(j: usize, steps: usize, n: usize) -> usize {
    (2 * j * n + steps) / (2 * steps)
}

/// Pixel indices in masking order. MiF sorts by descending score with ties
/// broken by ascending index; LiF is exactly the reverse sequence, so the
/// first `f` of one and the first `1 - f` of the other partition the image.
pub fn pixel_ranking(scores: &[f64], order: RankOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    if order == RankOrder::Lif {
        idx.reverse();
    }
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCurve {
    pub order: RankOrder,
    pub fractions: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Replacement value that erases class evidence for a given label.
fn mask_value(label: u8) -> f64 {
    if label == 1 {
        0.0
    } else {
        1.0
    }
}

pub fn perturbation_curves(
    model: &TrainedModel,
    samples: &[&LabeledSample],
    heatmaps: &[Heatmap],
    order: RankOrder,
    steps: usize,
) -> Result<PerturbationCurve> {
    if steps == 0 {
        return Err(Error::Param("perturbation needs at least one step".into()));
    }
    if samples.len() != heatmaps.len() {
        return Err(Error::Contract(format!(
            "{} samples but {} heatmaps",
            samples.len(),
            heatmaps.len()
        )));
    }
    for (s, h) in samples.iter().zip(heatmaps) {
        check_dims(&s.image, &h.scores, "heatmap vs image")?;
    }
    let predictions: Vec<Vec<u8>> = samples
        .par_iter()
        .zip(heatmaps.par_iter())
        .map(|(s, h)| {
            let ranking = pixel_ranking(h.data(), order);
            let n = ranking.len();
            let fill = mask_value(s.label);
            let mut img = s.image.clone();
            let mut done = 0;
            (0..=steps)
                .map(|j| {
                    let upto = masked_count(j, steps, n);
                    for &p in &ranking[done..upto] {
                        img.data_mut()[p] = fill;
                    }
                    done = upto;
                    model.predict_class(&img)
                })
                .collect::<Result<Vec<u8>>>()
        })
        .collect::<Result<_>>()?;
    let accuracy = (0..=steps)
        .map(|j| balanced_accuracy(samples.iter().zip(&predictions).map(|(s, p)| (s.label, p[j]))))
        .collect();
    Ok(PerturbationCurve {
        order,
        fractions: fraction_grid(steps),
        accuracy,
    })
}

/// Trapezoidal area of `lif - mif` over the shared fraction grid.
pub fn fidelity(mif: &PerturbationCurve, lif: &PerturbationCurve) -> Result<f64> {
    if mif.fractions != lif.fractions || mif.accuracy.len() != mif.fractions.len() || lif.accuracy.len() != lif.fractions.len() {
        return Err(Error::Contract("perturbation curves use different fraction grids".into()));
    }
    let diff: Vec<f64> = lif.accuracy.iter().zip(&mif.accuracy).map(|(l, m)| l - m).collect();
    Ok(trapezoid(&mif.fractions, &diff))
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Per-image score normalisation applied before ROC thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNormalization {
    #[default]
    Minmax,
    /// Fractional ranks in [0, 1]; tied scores share their mean rank.
    Rank,
}

impl ScoreNormalization {
    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        match self {
            ScoreNormalization::Minmax => {
                let mut v = scores.to_vec();
                crate::estimators::minmax_in_place(&mut v);
                v
            }
            ScoreNormalization::Rank => {
                let n = scores.len();
                let mut out = vec![0.0; n];
                if n < 2 {
                    return out;
                }
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
                let mut i = 0;
                while i < n {
                    let mut j = i;
                    while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
                        j += 1;
                    }
                    let r = (i + j) as f64 / 2.0 / (n - 1) as f64;
                    for &p in &idx[i..=j] {
                        out[p] = r;
                    }
                    i = j + 1;
                }
                out
            }
        }
    }
}

/// Mean ROC over images. `thresholds` ascend; rates at each threshold are
/// averaged across the images that have both mask and non-mask pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub mean_fpr: Vec<f64>,
    pub mean_tpr: Vec<f64>,
    pub images_used: usize,
    pub images_excluded: usize,
}

impl RocCurve {
    /// `(fpr, tpr)` points including the `(1, 1)` and `(0, 0)` endpoints,
    /// in order of increasing threshold.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(self.thresholds.len() + 2);
        pts.push((1.0, 1.0));
        pts.extend(self.mean_fpr.iter().copied().zip(self.mean_tpr.iter().copied()));
        pts.push((0.0, 0.0));
        pts
    }
}

pub fn roc_curve_mean(
    heatmaps: &[Heatmap],
    masks: &[&MaskImage],
    threshold_count: usize,
    normalization: ScoreNormalization,
) -> Result<RocCurve> {
    if threshold_count < 2 {
        return Err(Error::Param("ROC needs at least two thresholds".into()));
    }
    if heatmaps.len() != masks.len() {
        return Err(Error::Contract(format!("{} heatmaps but {} masks", heatmaps.len(), masks.len())));
    }
    for (h, m) in heatmaps.iter().zip(masks) {
        check_dims(&h.scores, m, "heatmap vs mask")?;
    }
    let thresholds: Vec<f64> = (0..threshold_count)
        .map(|i| i as f64 / (threshold_count - 1) as f64)
        .collect();
    let per_image: Vec<Option<(Vec<f64>, Vec<f64>)>> = heatmaps
        .par_iter()
        .zip(masks.par_iter())
        .map(|(h, m)| {
            let pos = m.count();
            let neg = m.len() - pos;
            if pos == 0 || neg == 0 {
                return None;
            }
            let scores = normalization.apply(h.data());
            let mut pos_scores: Vec<f64> = Vec::with_capacity(pos);
            let mut neg_scores: Vec<f64> = Vec::with_capacity(neg);
            for (&s, &inside) in scores.iter().zip(m.data()) {
                if inside {
                    pos_scores.push(s);
                } else {
                    neg_scores.push(s);
                }
            }
            pos_scores.sort_by(f64::total_cmp);
            neg_scores.sort_by(f64::total_cmp);
            let above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&s| s <= t);
            let tpr = thresholds.iter().map(|&t| above(&pos_scores, t) as f64 / pos as f64).collect();
            let fpr = thresholds.iter().map(|&t| above(&neg_scores, t) as f64 / neg as f64).collect();
            Some((fpr, tpr))
        })
        .collect();
    let used: Vec<&(Vec<f64>, Vec<f64>)> = per_image.iter().flatten().collect();
    let excluded = per_image.len() - used.len();
    if excluded > 0 {
        log::warn!("ROC: excluded {excluded} image(s) with an empty or full mask");
    }
    if used.is_empty() {
        return Err(Error::Contract("ROC: no image has both mask and non-mask pixels".into()));
    }
    let mean_at = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>, i: usize| {
        used.iter().map(|c| pick(c)[i]).sum::<f64>() / used.len() as f64
    };
    Ok(RocCurve {
        mean_fpr: (0..threshold_count).map(|i| mean_at(|c| &c.0, i)).collect(),
        mean_tpr: (0..threshold_count).map(|i| mean_at(|c| &c.1, i)).collect(),
        thresholds,
        images_used: used.len(),
        images_excluded: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Auc {
    /// Mean TPR over the threshold grid.
    pub mean_height: f64,
    /// Trapezoidal area over `(fpr, tpr)` including endpoints.
    pub trapezoid: f64,
}

pub fn auc(curve: &RocCurve) -> Auc {
    let mean_height = curve.mean_tpr.iter().sum::<f64>() / curve.mean_tpr.len().max(1) as f64;
    let trapezoid = curve
        .points()
        .windows(2)
        .map(|w| (w[0].0 - w[1].0).abs() * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Auc { mean_height, trapezoid }
}

/// Union of the top-ranked regions, added whole until they cover at least
/// `percent` of the pixels.
pub fn xrai_top_percent(ranked: &RankedRegions, regions: &RegionMap, percent: f64) -> Result<MaskImage> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Param(format!("percent must be in (0, 100], got {percent}")));
    }
    let total = regions.labels.len() as f64;
    let mut include = vec![false; regions.region_count()];
    let mut covered = 0usize;
    for &id in &ranked.order {
        if covered as f64 * 100.0 >= percent * total {
            break;
        }
        include[id as usize] = true;
        covered += regions.sizes[id as usize];
    }
    Ok(regions.labels.map(|&l| include[l as usize]))
}

/// Dice overlap; two empty masks score 1.
pub fn dsc(x: &MaskImage, y: &MaskImage) -> Result<f64> {
    check_dims(x, y, "dsc")?;
    let (a, b) = (x.count(), y.count());
    if a + b == 0 {
        return Ok(1.0);
    }
    let both = x.data().iter().zip(y.data()).filter(|(p, q)| **p && **q).count();
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DscCurve {
    pub percents: Vec<f64>,
    pub mean_dsc: Vec<f64>,
    pub max_dsc: f64,
    /// First percent attaining `max_dsc`.
    pub argmax_percent: f64,
}

pub fn dsc_curve(
    heatmaps: &[Heatmap],
    images: &[&Grid<f64>],
    masks: &[&MaskImage],
    felz: &FelzParams,
    percents: &[f64],
) -> Result<DscCurve> {
    let regions = images
        .par_iter()
        .map(|img| felzenszwalb_segment(img, felz))
        .collect::<Result<Vec<_>>>()?;
    dsc_curve_with_regions(heatmaps, &regions, masks, percents)
}

/// As [`dsc_curve`], reusing precomputed segmentations.
pub fn dsc_curve_with_regions(
    heatmaps: &[Heatmap],
    regions: &[RegionMap],
    masks: &[&MaskImage],
    percents: &[f64],
) -> Result<DscCurve> {
    if percents.is_empty() {
        return Err(Error::Param("empty percent grid".into()));
    }
    if heatmaps.len() != regions.len() || heatmaps.len() != masks.len() || heatmaps.is_empty() {
        return Err(Error::Contract(format!(
            "DSC inputs disagree: {} heatmaps, {} segmentations, {} masks",
            heatmaps.len(),
            regions.len(),
            masks.len()
        )));
    }
    let per_image: Vec<Vec<f64>> = heatmaps
        .par_iter()
        .zip(regions.par_iter())
        .zip(masks.par_iter())
        .map(|((h, r), m)| {
            let ranked = region_mean_scores(r, h)?;
            percents
                .iter()
                .map(|&p| dsc(&xrai_top_percent(&ranked, r, p)?, m))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mean_dsc: Vec<f64> = (0..percents.len())
        .map(|i| per_image.iter().map(|d| d[i]).sum::<f64>() / per_image.len() as f64)
        .collect();
    let (best, max_dsc) = mean_dsc
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    Ok(DscCurve {
        percents: percents.to_vec(),
        mean_dsc,
        max_dsc,
        argmax_percent: percents[best],
    })
}

fn write_rows(path: &Path, header: [&str; 3], rows: impl Iterator<Item = [f64; 3]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_perturbation_csv(mif: &PerturbationCurve, lif: &PerturbationCurve, path: impl AsRef<Path>) -> Result<()> {
    if mif.fractions != lif.fractions {
        return Err(Error::Contract("perturbation curves use different fraction grids".into()));
    }
    let rows = (0..mif.fractions.len()).map(|i| [mif.fractions[i], mif.accuracy[i], lif.accuracy[i]]);
    write_rows(path.as_ref(), ["fraction", "acc_mif", "acc_lif"], rows)
}

pub fn write_roc_csv(curve: &RocCurve, path: impl AsRef<Path>) -> Result<()> {
    let rows = (0..curve.thresholds.len()).map(|i| [curve.thresholds[i], curve.mean_fpr[i], curve.mean_tpr[i]]);
    write_rows(path.as_ref(), ["threshold", "mean_fpr", "mean_tpr"], rows)
}

pub fn write_dsc_csv(curve: &DscCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["percent", "mean_dsc"]).map_err(|e| csv_err(path, e))?;
    for (p, d) in curve.percents.iter().zip(&curve.mean_dsc) {
        w.write_record([p.to_string(), d.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_table(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != width {
            return Err(Error::Validation(format!("{}: expected {width} columns", path.display())));
        }
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::Validation(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}

pub fn read_perturbation_csv(path: impl AsRef<Path>) -> Result<(PerturbationCurve, PerturbationCurve)> {
    let rows = read_table(path.as_ref(), 3)?;
    let fractions: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let curve = |order, col: usize| PerturbationCurve {
        order,
        fractions: fractions.clone(),
        accuracy: rows.iter().map(|r| r[col]).collect(),
    };
    Ok((curve(RankOrder::Mif, 1), curve(RankOrder::Lif, 2)))
}

pub fn read_roc_csv(path: impl AsRef<Path>) -> Result<RocCurve> {
    let rows = read_table(path.as_ref(), 3)?;
    Ok(RocCurve {
        thresholds: rows.iter().map(|r| r[0]).collect(),
        mean_fpr: rows.iter().map(|r| r[1]).collect(),
        mean_tpr: rows.iter().map(|r| r[2]).collect(),
        images_used: 0,
        images_excluded: 0,
    })
}

pub fn read_dsc_csv(path: impl AsRef<Path>) -> Result<DscCurve> {
    let rows = read_table(path.as_ref(), 2)?;
    if rows.is_empty() {
        return Err(Error::Validation(format!("{}: no rows", path.as_ref().display())));
    }
    let percents: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let mean_dsc: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let (best, max_dsc) = mean_dsc
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    Ok(DscCurve {
        argmax_percent: percents[best],
        percents,
        mean_dsc,
        max_dsc,
    })
}
