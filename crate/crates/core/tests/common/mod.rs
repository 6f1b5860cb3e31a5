#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use saliency_core::bench::{Mode, Run, RunConfig};
use saliency_core::nn::{BackwardMode, LayerSpec, Network, Tensor};
use saliency_core::Result;

/// Outcome of comparing backward(Standard) with central differences.
#[derive(Debug, Default, Clone, Copy)]
pub struct OracleStats {
    pub checked: usize,
    /// Pixels whose perturbation changed a relu gate or pooling switch.
    pub excluded: usize,
    pub max_rel_err: f64,
}

impl OracleStats {
    pub fn merge(&mut self, o: OracleStats) {
        self.checked += o.checked;
        self.excluded += o.excluded;
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
    }

    pub fn excluded_fraction(&self) -> f64 {
        self.excluded as f64 / (self.checked + self.excluded).max(1) as f64
    }
}

/// Checks the input gradient of the scalar network output at `pixels`
/// (all pixels when `None`). Relative error is
/// `|g - fd| / max(|g|, |fd|, 1e-3 * max|g|)`.
pub fn gradient_check(net: &Network, x: &Tensor, pixels: Option<&[usize]>, step: f64) -> Result<OracleStats> {
    let (out, tape) = net.forward(x)?;
    assert_eq!(out.len(), 1);
    let key = tape.linear_region_key();
    let g = tape.backward(&Tensor::scalar(1.0), BackwardMode::Standard)?;
    let gmax = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * gmax).max(1e-12);
    let all: Vec<usize> = (0..x.len()).collect();
    let mut stats = OracleStats::default();
    for &i in pixels.unwrap_or(&all) {
        let eval = |delta: f64| -> Result<(f64, u64)> {
            let mut xp = x.clone();
            xp.data_mut()[i] += delta;
            let (o, t) = net.forward(&xp)?;
            Ok((o.data()[0], t.linear_region_key()))
        };
        let (fp, kp) = eval(step)?;
        let (fm, km) = eval(-step)?;
        if kp != key || km != key {
            stats.excluded += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * step);
        let gi = g.data()[i];
        let rel = (gi - fd).abs() / gi.abs().max(fd.abs()).max(floor);
        stats.checked += 1;
        stats.max_rel_err = stats.max_rel_err.max(rel);
    }
    Ok(stats)
}

/// A small random network ending in a scalar output, exercising every
/// layer kind, with a random input.
pub fn random_case(rng: &mut ChaCha8Rng) -> (Network, Tensor) {
    let c = rng.random_range(1..=2);
    let side = [4usize, 6, 8][rng.random_range(0..3)];
    let mut specs = Vec::new();
    let mut s = side;
    for _ in 0..rng.random_range(1..=2) {
        specs.push(LayerSpec::Conv2d {
            out_channels: rng.random_range(1..=4),
            kernel: [1usize, 3, 5][rng.random_range(0..3)],
        });
        if rng.random_bool(0.7) {
            specs.push(LayerSpec::Relu);
        }
        if s.is_multiple_of(2) && rng.random_bool(0.6) {
            specs.push(LayerSpec::MaxPool2d);
            s /= 2;
        }
    }
    if rng.random_bool(0.5) {
        specs.push(LayerSpec::Dense {
            outputs: rng.random_range(2..=6),
        });
        specs.push(LayerSpec::Relu);
    }
    specs.push(LayerSpec::Dense { outputs: 1 });
    if rng.random_bool(0.3) {
        specs.push(LayerSpec::Sigmoid);
    }
    let net = Network::new(vec![c, side, side], &specs, rng).expect("valid random network");
    let data = (0..c * side * side).map(|_| rng.random::<f64>()).collect();
    let x = Tensor::new(vec![c, side, side], data).unwrap();
    (net, x)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Default configuration with its run directory at `out`.
pub fn default_config(out: &Path) -> RunConfig {
    RunConfig {
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

/// Data and model of the default configuration, cached across test
/// binaries under the cargo target directory.
pub fn cached_default_run() -> Run {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("default-run");
    let mut run = Run::open(default_config(&dir)).expect("open run");
    run.gen_data(Mode::Cached).expect("gen-data");
    run.train(Mode::Cached).expect("train");
    run
}

/// Recursively lists files under `dir`, relative to it, sorted.
pub fn list_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}
