//! Run configuration: TOML with dotted keys, printable as a flat key list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SceneParams;
use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, EstimatorParams};
use crate::heatmap::PostOp;
use crate::metrics::{ScoreNormalization, DEFAULT_FRACTION_STEPS, DEFAULT_PERCENT_GRID, DEFAULT_THRESHOLD_COUNT};
use crate::model::ModelConfig;
use crate::segmentation::{FelzParams, RegionPooling};

/// Post-processing variant evaluated for every estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    Absolute,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Original, Variant::Absolute];

    pub fn key(&self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Absolute => "absolute",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::Validation(format!("unknown variant `{s}` (expected original or absolute)")))
    }

    pub fn ops(&self) -> &'static [PostOp] {
        match self {
            Variant::Original => &[PostOp::SignInvertIfClass0],
            Variant::Absolute => &[PostOp::SignInvertIfClass0, PostOp::Absolute],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    /// Fraction of contrast (label 1) samples.
    pub balance: f64,
    pub eval_size: usize,
    pub scene: SceneParams,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n: 2500,
            balance: 0.5,
            eval_size: 100,
            scene: SceneParams::default(),
        }
    }
}

/// Pre-existing artifacts that replace the generating stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsSection {
    /// Dataset manifest CSV; skips `gen-data`.
    pub dataset: Option<PathBuf>,
    /// Model file; skips `train`.
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeSection {
    pub estimators: Vec<EstimatorKind>,
    pub variants: Vec<Variant>,
    /// Parameters shared by all estimators.
    pub params: EstimatorParams,
    /// Per-estimator parameter overrides, keyed by estimator key.
    pub overrides: BTreeMap<String, toml::Table>,
}

impl Default for AttributeSection {
    fn default() -> Self {
        Self {
            estimators: EstimatorKind::ALL.to_vec(),
            variants: Variant::ALL.to_vec(),
            params: EstimatorParams::default(),
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub fraction_steps: usize,
    pub threshold_count: usize,
    pub roc_normalization: ScoreNormalization,
    pub percent_grid: Vec<f64>,
    pub region_pooling: RegionPooling,
    pub felzenszwalb: FelzParams,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            fraction_steps: DEFAULT_FRACTION_STEPS,
            threshold_count: DEFAULT_THRESHOLD_COUNT,
            roc_normalization: ScoreNormalization::Minmax,
            percent_grid: DEFAULT_PERCENT_GRID.to_vec(),
            region_pooling: RegionPooling::Mean,
            felzenszwalb: FelzParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    pub out: PathBuf,
    pub inputs: InputsSection,
    pub data: DataSection,
    pub model: ModelConfig,
    pub attribute: AttributeSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            inputs: InputsSection::default(),
            data: DataSection::default(),
            model: ModelConfig::default(),
            attribute: AttributeSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

fn config_err(message: impl Into<String>) -> Error {
    Error::Validation(message.into())
}

/// Rejects `seed` keys below the top level: stage seeds are derived.
fn reject_nested_seeds(table: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if !prefix.is_empty() && k == "seed" {
            return Err(config_err(format!("`{key}` is not configurable; set the top-level `seed`")));
        }
        if let toml::Value::Table(t) = v {
            reject_nested_seeds(t, &key)?;
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        reject_nested_seeds(&table, "")?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        self.data.scene.validate()?;
        if d.n < 10 || !(0.0..=1.0).contains(&d.balance) || d.eval_size == 0 {
            return Err(config_err("data: need n >= 10, balance in [0, 1], eval_size >= 1"));
        }
        if d.n - d.n * 4 / 5 < d.eval_size {
            return Err(config_err(format!(
                "data: eval_size {} exceeds the {} held-out samples",
                d.eval_size,
                d.n - d.n * 4 / 5
            )));
        }
        self.model.validate()?;
        if self.model.input_side != d.scene.side {
            return Err(config_err(format!(
                "model input side {} does not match image side {}",
                self.model.input_side, d.scene.side
            )));
        }
        let a = &self.attribute;
        if a.estimators.is_empty() || a.variants.is_empty() {
            return Err(config_err("attribute: estimators and variants must be nonempty"));
        }
        for key in a.overrides.keys() {
            key.parse::<EstimatorKind>()?;
        }
        for &kind in &a.estimators {
            self.params_for(kind)?.validate()?;
        }
        let m = &self.metrics;
        m.felzenszwalb.validate()?;
        if m.fraction_steps == 0 || m.threshold_count < 2 {
            return Err(config_err("metrics: need fraction_steps >= 1 and threshold_count >= 2"));
        }
        if m.percent_grid.is_empty() || m.percent_grid.iter().any(|&p| !(p > 0.0 && p <= 100.0)) {
            return Err(config_err("metrics: percent_grid values must lie in (0, 100]"));
        }
        Ok(())
    }

    /// Estimators to run: the configured list, deduplicated, with the random
    /// baseline always present.
    pub fn estimators(&self) -> Vec<EstimatorKind> {
        let mut out: Vec<EstimatorKind> = Vec::new();
        for &k in self.attribute.estimators.iter().chain([&EstimatorKind::Random]) {
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut v = self.attribute.variants.clone();
        v.sort();
        v.dedup();
        v
    }

    /// Shared parameters with the estimator's overrides applied. The seed is
    /// left at 0; the pipeline derives one per image.
    pub fn params_for(&self, kind: EstimatorKind) -> Result<EstimatorParams> {
        let Some(over) = self.attribute.overrides.get(kind.key()) else {
            return Ok(self.attribute.params.clone());
        };
        let mut base = toml::Table::try_from(&self.attribute.params).map_err(|e| config_err(e.to_string()))?;
        for (k, v) in over {
            base.insert(k.clone(), v.clone());
        }
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("attribute.overrides.{}: {e}", kind.key())))
    }

    /// Every setting as `dotted.key = value` lines, sorted by key. The
    /// output parses back into the same config. Section seeds are omitted
    /// because the pipeline derives them from the master seed.
    pub fn to_flat_lines(&self) -> Vec<String> {
        let table = toml::Table::try_from(self).expect("config serializes to TOML");
        let mut lines = Vec::new();
        flatten(&table, "", &mut lines);
        lines
    }

    /// Flat lines whose key starts with one of `prefixes`.
    pub(crate) fn section_lines(&self, prefixes: &[&str]) -> Vec<String> {
        self.to_flat_lines()
            .into_iter()
            .filter(|l| prefixes.iter().any(|p| l.starts_with(p)))
            .collect()
    }

    /// Hash of everything except the output directory.
    pub fn hash(&self) -> String {
        let lines: Vec<String> = self.to_flat_lines().into_iter().filter(|l| !l.starts_with("out ")).collect();
        hash_lines(&lines)
    }
}

fn flatten(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        if !prefix.is_empty() && k == "seed" {
            continue;
        }
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) if !t.is_empty() => flatten(t, &key, out),
            other => out.push(format!("{key} = {other}")),
        }
    }
}

pub(crate) fn hash_lines(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    format!("{:x}", h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_print_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_flat_lines().join("\n");
        assert!(text.contains("data.n = 2500"));
        assert!(text.contains("metrics.felzenszwalb.k = 80.0"));
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn dotted_keys_override_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 7\ndata.n = 500\nattribute.params.noise_sigma = 0.2").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.n, 500);
        assert_eq!(cfg.attribute.params.noise_sigma, 0.2);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_estimator_is_rejected() {
        let err = RunConfig::from_toml_str("attribute.estimators = [\"backprop\", \"gradcam\"]").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(err.to_string().contains("gradcam"));
    }

    #[test]
    fn typos_and_nested_seeds_are_rejected() {
        assert!(RunConfig::from_toml_str("data.nn = 3").is_err());
        assert!(RunConfig::from_toml_str("model.seed = 3").is_err());
        assert!(RunConfig::from_toml_str("attribute.variants = []").is_err());
        assert!(RunConfig::from_toml_str("attribute.overrides.gradcam.steps = 3").is_err());
    }

    #[test]
    fn overrides_apply_per_estimator() {
        let cfg = RunConfig::from_toml_str("attribute.overrides.smoothgrad.noise_sigma = 0.3").unwrap();
        assert_eq!(cfg.params_for(EstimatorKind::Smoothgrad).unwrap().noise_sigma, 0.3);
        assert_eq!(cfg.params_for(EstimatorKind::SmoothgradSq).unwrap().noise_sigma, 0.15);
        assert!(RunConfig::from_toml_str("attribute.overrides.smoothgrad.noise_sigma = -1.0").is_err());
    }

    #[test]
    fn random_is_always_run() {
        let cfg = RunConfig::from_toml_str("attribute.estimators = [\"intgrad\", \"intgrad\"]").unwrap();
        assert_eq!(cfg.estimators(), vec![EstimatorKind::Intgrad, EstimatorKind::Random]);
    }

    #[test]
    fn hash_tracks_content_not_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.attribute.params.noise_sigma = 0.2;
        assert_ne!(a.hash(), b.hash());
    }
}
