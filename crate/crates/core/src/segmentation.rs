//! Felzenszwalb-Huttenlocher graph-based segmentation on the 4-neighbour
//! pixel grid, and per-region pooling of heatmap scores.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::pgm;
use crate::error::{Error, Result};
use crate::grid::{check_dims, Grid, Image};
use crate::heatmap::Heatmap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FelzParams {
    /// Scale parameter in 8-bit intensity units: on [0, 1] images the merge
    /// threshold is `k / 255 / |C|`, matching the common reference
    /// implementations.
    pub k: f64,
    pub min_size: usize,
    /// Gaussian pre-smoothing; 0 disables it.
    pub sigma: f64,
}

impl Default for FelzParams {
    fn default() -> Self {
        Self {
            k: 80.0,
            min_size: 20,
            sigma: 0.8,
        }
    }
}

impl FelzParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || self.min_size == 0 || !(self.sigma >= 0.0) {
            return Err(Error::Param(format!("invalid segmentation parameters {self:?}")));
        }
        Ok(())
    }
}

/// A partition of the image into labelled, 4-connected regions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub labels: Grid<u32>,
    /// Pixel count per region id.
    pub sizes: Vec<usize>,
}

impl RegionMap {
    pub fn region_count(&self) -> usize {
        self.sizes.len()
    }

    /// Writes the labels as a PGM with maxval equal to the region count.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let maxval = self.region_count().clamp(1, 65535) as u32;
        let samples: Vec<u32> = self.labels.data().iter().map(|&l| l.min(maxval)).collect();
        let bytes = pgm::encode_pgm(self.labels.width(), self.labels.height(), maxval, &samples);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * (x / sigma).powi(2)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicated borders.
pub fn smooth(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = image.dims();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = Grid::from_fn(h, w, |row, col| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, kv)| kv * image.get(row, clamp(col as isize + i as isize - r, w)))
            .sum()
    });
    Grid::from_fn(h, w, |row, col| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, kv)| kv * horiz.get(clamp(row as isize + i as isize - r, h), col))
            .sum()
    })
}

struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
    /// Largest edge weight inside each component's spanning tree.
    internal: Vec<f64>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    /// Joins two roots; the larger component (lower index on ties) survives.
    fn union(&mut self, a: usize, b: usize, weight: f64) -> usize {
        let (keep, gone) = if self.size[a] > self.size[b] || (self.size[a] == self.size[b] && a < b) {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[gone] = keep;
        self.size[keep] += self.size[gone];
        self.internal[keep] = self.internal[keep].max(self.internal[gone]).max(weight);
        keep
    }
}

struct Edge {
    a: u32,
    b: u32,
    w: f64,
}

pub fn felzenszwalb_segment(image: &Image, params: &FelzParams) -> Result<RegionMap> {
    params.validate()?;
    let (h, w) = image.dims();
    let smoothed = smooth(image, params.sigma);
    let px = smoothed.data();

    let mut edges = Vec::with_capacity(2 * h * w);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                edges.push(Edge { a: i as u32, b: (i + 1) as u32, w: (px[i] - px[i + 1]).abs() });
            }
            if r + 1 < h {
                edges.push(Edge { a: i as u32, b: (i + w) as u32, w: (px[i] - px[i + w]).abs() });
            }
        }
    }
    // Stable: equal weights keep pixel-index order.
    edges.sort_by(|x, y| x.w.total_cmp(&y.w));

    let k = params.k / 255.0;
    let mut sets = DisjointSets::new(h * w);
    for e in &edges {
        let (ra, rb) = (sets.find(e.a as usize), sets.find(e.b as usize));
        if ra == rb {
            continue;
        }
        let ta = sets.internal[ra] + k / sets.size[ra] as f64;
        let tb = sets.internal[rb] + k / sets.size[rb] as f64;
        if e.w <= ta.min(tb) {
            sets.union(ra, rb, e.w);
        }
    }
    // Absorb undersized components through their cheapest boundary edge.
    for e in &edges {
        let (ra, rb) = (sets.find(e.a as usize), sets.find(e.b as usize));
        if ra != rb && (sets.size[ra] < params.min_size || sets.size[rb] < params.min_size) {
            sets.union(ra, rb, e.w);
        }
    }

    let mut id_of_root = vec![u32::MAX; h * w];
    let mut sizes = Vec::new();
    let mut labels = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let root = sets.find(i);
        if id_of_root[root] == u32::MAX {
            id_of_root[root] = sizes.len() as u32;
            sizes.push(0);
        }
        let id = id_of_root[root];
        sizes[id as usize] += 1;
        labels.push(id);
    }
    Ok(RegionMap {
        labels: Grid::new(h, w, labels)?,
        sizes,
    })
}

/// How pixel scores are pooled into a region score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionPooling {
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionStat {
    pub mean: f64,
    pub pixels: usize,
}

/// Regions ordered by descending pooled score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRegions {
    /// Region ids, best first; ties go to the lower id.
    pub order: Vec<u32>,
    /// Indexed by region id.
    pub stats: Vec<RegionStat>,
}

pub fn region_mean_scores(regions: &RegionMap, heatmap: &Heatmap) -> Result<RankedRegions> {
    check_dims(&regions.labels, &heatmap.scores, "region map vs heatmap")?;
    let n = regions.region_count();
    let mut sums = vec![0.0; n];
    for (&l, &s) in regions.labels.data().iter().zip(heatmap.data()) {
        sums[l as usize] += s;
    }
    let stats: Vec<RegionStat> = sums
        .iter()
        .zip(&regions.sizes)
        .map(|(&s, &p)| RegionStat {
            mean: s / p as f64,
            pixels: p,
        })
        .collect();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| {
        stats[b as usize]
            .mean
            .total_cmp(&stats[a as usize].mean)
            .then(a.cmp(&b))
    });
    Ok(RankedRegions { order, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::Provenance;

    fn params(k: f64, min_size: usize, sigma: f64) -> FelzParams {
        FelzParams { k, min_size, sigma }
    }

    #[test]
    fn constant_image_is_one_region() {
        for k in [0.01, 1.0, 500.0] {
            let m = felzenszwalb_segment(&Grid::filled(8, 8, 0.3), &params(k, 1, 0.8)).unwrap();
            assert_eq!(m.region_count(), 1);
        }
    }

    #[test]
    fn two_halves_give_two_regions() {
        let img = Grid::from_fn(8, 8, |_, c| if c < 4 { 0.0 } else { 1.0 });
        let m = felzenszwalb_segment(&img, &params(0.01, 1, 0.0)).unwrap();
        assert_eq!(m.region_count(), 2);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(*m.labels.get(r, c), (c >= 4) as u32);
            }
        }
    }

    #[test]
    fn strong_edges_everywhere_give_one_region_per_pixel() {
        // Checkerboard: every 4-neighbour pair differs by 1 > k.
        let img = Grid::from_fn(6, 6, |r, c| ((r + c) % 2) as f64);
        let m = felzenszwalb_segment(&img, &params(0.5, 1, 0.0)).unwrap();
        assert_eq!(m.region_count(), 36);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let img = Grid::filled(5, 7, 0.25);
        assert!(smooth(&img, 1.3).data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn region_ranking_examples() {
        let one = RegionMap {
            labels: Grid::filled(2, 2, 0),
            sizes: vec![4],
        };
        let h = Heatmap::new(Grid::new(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap(), Provenance::new("x", ""));
        let r = region_mean_scores(&one, &h).unwrap();
        assert_eq!(r.order, vec![0]);
        assert_eq!(r.stats[0].mean, 3.0);

        let two = RegionMap {
            labels: Grid::new(1, 4, vec![0, 0, 1, 1]).unwrap(),
            sizes: vec![2, 2],
        };
        let h = Heatmap::new(Grid::new(1, 4, vec![0.1, 0.1, 0.9, 0.9]).unwrap(), Provenance::new("x", ""));
        assert_eq!(region_mean_scores(&two, &h).unwrap().order, vec![1, 0]);
        // Ties: lower id first.
        let h = Heatmap::new(Grid::filled(1, 4, 0.5), Provenance::new("x", ""));
        assert_eq!(region_mean_scores(&two, &h).unwrap().order, vec![0, 1]);
        let bad = Heatmap::new(Grid::filled(2, 2, 0.5), Provenance::new("x", ""));
        assert!(region_mean_scores(&two, &bad).is_err());
    }
}
