//! Stage orchestration over a persistent run directory.
//!
//! Layout under the output directory:
//! `data/`, `model/`, `heatmaps/<estimator>/<variant>/`, `curves/`,
//! `report/`, and `manifest.json`, which doubles as the stage cache index.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hash_lines, RunConfig, Variant};
use super::report;
use crate::data::{read_dataset, write_dataset, Dataset, LabeledSample, Split, SplitPlan};
use crate::error::{Error, Result};
use crate::estimators::{compute, postprocess, EstimatorKind, EstimatorParams};
use crate::heatmap::{read_heatmap, write_heatmap, Heatmap};
use crate::metrics::{
    dsc_curve_with_regions, perturbation_curves, roc_curve_mean, write_dsc_csv, write_perturbation_csv, write_roc_csv,
    RankOrder,
};
use crate::model::{load_model, save_model, train, TrainedModel};
use crate::rng::{child_seed, labeled_seed};
use crate::segmentation::felzenszwalb_segment;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Fidelity,
    Roc,
    Dsc,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Fidelity, Metric::Roc, Metric::Dsc];

    pub fn key(&self) -> &'static str {
        match self {
            Metric::Fidelity => "fidelity",
            Metric::Roc => "roc",
            Metric::Dsc => "dsc",
        }
    }
}

/// Relative path of a metric curve CSV inside the run directory.
pub fn curve_path(kind: EstimatorKind, variant: Variant, metric: Metric) -> PathBuf {
    PathBuf::from("curves").join(format!("{}_{}_{}.csv", kind.key(), variant.key(), metric.key()))
}

pub fn heatmap_dir(kind: EstimatorKind, variant: Variant) -> PathBuf {
    PathBuf::from("heatmaps").join(kind.key()).join(variant.key())
}

pub fn heatmap_path(kind: EstimatorKind, variant: Variant, id: usize) -> PathBuf {
    heatmap_dir(kind, variant).join(format!("{id:05}.hmp"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the settings and upstream hashes this output depends on.
    pub hash: String,
    /// Output files, relative to the run directory.
    pub outputs: Vec<PathBuf>,
    pub finished_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub complete: bool,
    pub failed_stage: Option<String>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    /// Keyed by step, e.g. `train` or `eval/intgrad/roc`.
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn artifact_paths(&self) -> Vec<PathBuf> {
        self.stages.values().flat_map(|s| s.outputs.iter().cloned()).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Whether a step is recomputed when its cache entry is valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Cached,
    Force,
}

/// An open run directory bound to one configuration.
pub struct Run {
    pub config: RunConfig,
    root: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let root = config.out.clone();
        ensure_dir(&root)?;
        let previous = root.join(MANIFEST_FILE);
        let stages = if previous.exists() {
            RunManifest::load(&previous).map(|m| m.stages).unwrap_or_default()
        } else {
            BTreeMap::new()
        };
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config.hash(),
            complete: false,
            failed_stage: None,
            started_at: now(),
            finished_at: None,
            stages,
        };
        Ok(Self { config, root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.path(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn is_cached(&self, key: &str, hash: &str) -> bool {
        self.manifest
            .stages
            .get(key)
            .is_some_and(|r| r.hash == hash && r.outputs.iter().all(|p| self.path(p).exists()))
    }

    fn record(&mut self, key: &str, hash: String, outputs: Vec<PathBuf>) -> Result<()> {
        self.manifest.stages.insert(
            key.to_string(),
            StageRecord {
                hash,
                outputs,
                finished_at: now(),
            },
        );
        self.save_manifest()
    }

    fn require(&self, paths: &[PathBuf]) -> Result<()> {
        let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingInputs(missing))
        }
    }

    /// Runs `f` as stage `stage`, recording a failure in the manifest.
    fn stage<T>(&mut self, stage: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("stage {stage}");
        match f(self) {
            Ok(v) => Ok(v),
            Err(e) => {
                self.manifest.complete = false;
                self.manifest.failed_stage = Some(stage.to_string());
                let _ = self.save_manifest();
                Err(Error::Stage {
                    stage,
                    source: Box::new(e),
                })
            }
        }
    }

    // ---- data ------------------------------------------------------------

    fn dataset_manifest(&self) -> PathBuf {
        match &self.config.inputs.dataset {
            Some(p) => p.clone(),
            None => self.path("data/manifest.csv"),
        }
    }

    fn data_hash(&self) -> Result<String> {
        match &self.config.inputs.dataset {
            Some(p) => Ok(hash_lines(&[format!("dataset file {}", file_digest(p)?)])),
            None => Ok(hash_lines(&self.config.section_lines(&["seed ", "data."]))),
        }
    }

    pub fn gen_data(&mut self, mode: Mode) -> Result<()> {
        self.stage("gen-data", |run| {
            if run.config.inputs.dataset.is_some() {
                log::info!("using the configured dataset; nothing to generate");
                return Ok(());
            }
            let hash = run.data_hash()?;
            if mode == Mode::Cached && run.is_cached("gen-data", &hash) {
                return Ok(());
            }
            let d = &run.config.data;
            let mut scene = d.scene.clone();
            scene.seed = labeled_seed(run.config.seed, "data");
            let plan = SplitPlan {
                train: d.n * 4 / 5,
                eval: d.eval_size,
            };
            let ds = crate::data::generate_dataset_with_split(&scene, d.n, d.balance, plan)?;
            let dir = run.path("data");
            fresh_dir(&dir)?;
            write_dataset(&ds, &dir)?;
            let summary = serde_json::json!({
                "samples": ds.samples.len(),
                "mean_mask_coverage": ds.mean_mask_coverage(),
                "class_counts": {
                    "train": ds.class_counts(Split::Train),
                    "test": ds.class_counts(Split::Test),
                    "eval": ds.class_counts(Split::Eval),
                },
            });
            let summary_path = dir.join("summary.json");
            std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("json"))
                .map_err(|e| Error::io(&summary_path, e))?;
            run.record(
                "gen-data",
                hash,
                vec!["data/manifest.csv".into(), "data/summary.json".into()],
            )
        })
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let manifest = self.dataset_manifest();
        self.require(std::slice::from_ref(&manifest))?;
        read_dataset(manifest)
    }

    // ---- model -----------------------------------------------------------

    fn model_file(&self) -> PathBuf {
        match &self.config.inputs.model {
            Some(p) => p.clone(),
            None => self.path("model/model.bin"),
        }
    }

    fn train_hash(&self) -> Result<String> {
        match &self.config.inputs.model {
            Some(p) => Ok(hash_lines(&[format!("model file {}", file_digest(p)?)])),
            None => {
                let mut lines = vec![self.data_hash()?];
                lines.extend(self.config.section_lines(&["seed ", "model."]));
                Ok(hash_lines(&lines))
            }
        }
    }

    pub fn train(&mut self, mode: Mode) -> Result<()> {
        self.stage("train", |run| {
            if run.config.inputs.model.is_some() {
                log::info!("using the configured model; nothing to train");
                return Ok(());
            }
            let hash = run.train_hash()?;
            if mode == Mode::Cached && run.is_cached("train", &hash) {
                return Ok(());
            }
            let ds = run.load_dataset()?;
            let mut cfg = run.config.model.clone();
            cfg.seed = labeled_seed(run.config.seed, "train");
            let model = train(&ds, &cfg)?;
            log::info!(
                "trained: train acc {:.4}, held-out acc {:.4}",
                model.meta.train_balanced_accuracy,
                model.meta.test_balanced_accuracy
            );
            let dir = run.path("model");
            fresh_dir(&dir)?;
            save_model(&model, dir.join("model.bin"))?;
            let meta_path = dir.join("training.json");
            std::fs::write(&meta_path, serde_json::to_string_pretty(&model.meta).expect("json"))
                .map_err(|e| Error::io(&meta_path, e))?;
            run.record(
                "train",
                hash,
                vec!["model/model.bin".into(), "model/training.json".into()],
            )
        })
    }

    pub fn load_model(&self) -> Result<TrainedModel> {
        let path = self.model_file();
        self.require(std::slice::from_ref(&path))?;
        load_model(path)
    }

    // ---- attribution -----------------------------------------------------

    fn attribute_hash(&self, kind: EstimatorKind) -> Result<String> {
        let p = self.config.params_for(kind)?;
        let relevant = match kind {
            EstimatorKind::Intgrad | EstimatorKind::IntgradBw => format!("steps={}", p.steps),
            EstimatorKind::ExpectedGrad => format!("reference_samples={}", p.reference_samples),
            EstimatorKind::Smoothgrad | EstimatorKind::SmoothgradSq => {
                format!("noise_samples={},noise_sigma={}", p.noise_samples, p.noise_sigma)
            }
            _ => String::new(),
        };
        let variants: Vec<&str> = self.config.variants().iter().map(|v| v.key()).collect();
        Ok(hash_lines(&[
            self.data_hash()?,
            self.train_hash()?,
            format!("seed = {}", self.config.seed),
            format!("estimator {} {relevant}", kind.key()),
            format!("variants {}", variants.join(",")),
        ]))
    }

    /// Parameters for one image: the per-estimator settings with a seed
    /// derived from the master seed and the sample id.
    pub fn image_params(&self, kind: EstimatorKind, sample_id: usize) -> Result<EstimatorParams> {
        let mut p = self.config.params_for(kind)?;
        p.seed = child_seed(labeled_seed(self.config.seed, &format!("attribute/{}", kind.key())), sample_id as u64);
        Ok(p)
    }

    pub fn attribute(&mut self, mode: Mode) -> Result<()> {
        self.stage("attribute", |run| {
            let todo: Vec<(EstimatorKind, String)> = run
                .config
                .estimators()
                .into_iter()
                .map(|k| Ok((k, run.attribute_hash(k)?)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|(k, h)| mode == Mode::Force || !run.is_cached(&format!("attribute/{}", k.key()), h))
                .collect();
            if todo.is_empty() {
                return Ok(());
            }
            let ds = run.load_dataset()?;
            let model = run.load_model()?;
            let eval: Vec<&LabeledSample> = ds.split(Split::Eval).collect();
            let pool: Vec<&crate::grid::Image> = ds.split(Split::Train).map(|s| &s.image).collect();
            let variants = run.config.variants();
            for (kind, hash) in todo {
                log::info!("attribute {}", kind.key());
                for &v in &variants {
                    fresh_dir(&run.path(heatmap_dir(kind, v)))?;
                }
                let params: Vec<EstimatorParams> =
                    eval.iter().map(|s| run.image_params(kind, s.id)).collect::<Result<_>>()?;
                let run_ref = &*run;
                eval.par_iter().zip(params.par_iter()).try_for_each(|(s, p)| -> Result<()> {
                    let predicted = model.predict_class(&s.image)?;
                    let raw = compute(kind, &model, &s.image, 1, p, &pool)?;
                    for &v in &variants {
                        write_heatmap(
                            &postprocess(&raw, v.ops(), predicted),
                            run_ref.path(heatmap_path(kind, v, s.id)),
                        )?;
                    }
                    Ok(())
                })?;
                let outputs = variants
                    .iter()
                    .flat_map(|&v| eval.iter().map(move |s| heatmap_path(kind, v, s.id)))
                    .collect();
                run.record(&format!("attribute/{}", kind.key()), hash, outputs)?;
            }
            Ok(())
        })
    }

    pub fn load_heatmaps(&self, kind: EstimatorKind, variant: Variant, samples: &[&LabeledSample]) -> Result<Vec<Heatmap>> {
        let paths: Vec<PathBuf> = samples.iter().map(|s| self.path(heatmap_path(kind, variant, s.id))).collect();
        self.require(&paths)?;
        paths.iter().map(read_heatmap).collect()
    }

    // ---- evaluation ------------------------------------------------------

    fn eval_hash(&self, kind: EstimatorKind, metric: Metric) -> Result<String> {
        let settings = match metric {
            Metric::Fidelity => self.config.section_lines(&["metrics.fraction_steps"]),
            Metric::Roc => self
                .config
                .section_lines(&["metrics.threshold_count", "metrics.roc_normalization"]),
            Metric::Dsc => self.config.section_lines(&[
                "metrics.percent_grid",
                "metrics.felzenszwalb",
                "metrics.region_pooling",
            ]),
        };
        let mut lines = vec![self.attribute_hash(kind)?, format!("metric {}", metric.key())];
        lines.extend(settings);
        Ok(hash_lines(&lines))
    }

    pub fn eval(&mut self, metrics: &[Metric], mode: Mode) -> Result<()> {
        self.stage("eval", |run| {
            let mut todo = Vec::new();
            for kind in run.config.estimators() {
                for &metric in metrics {
                    let hash = run.eval_hash(kind, metric)?;
                    let key = format!("eval/{}/{}", kind.key(), metric.key());
                    if mode == Mode::Force || !run.is_cached(&key, &hash) {
                        todo.push((kind, metric, key, hash));
                    }
                }
            }
            if todo.is_empty() {
                return Ok(());
            }
            let ds = run.load_dataset()?;
            let model = run.load_model()?;
            let eval: Vec<&LabeledSample> = ds.split(Split::Eval).collect();
            let masks: Vec<&crate::grid::MaskImage> = eval.iter().map(|s| &s.mask).collect();
            let m = run.config.metrics.clone();
            let regions = if todo.iter().any(|t| t.1 == Metric::Dsc) {
                eval.par_iter()
                    .map(|s| felzenszwalb_segment(&s.image, &m.felzenszwalb))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            ensure_dir(&run.path("curves"))?;
            for (kind, metric, key, hash) in todo {
                log::info!("eval {} {}", kind.key(), metric.key());
                let mut outputs = Vec::new();
                for v in run.config.variants() {
                    let heatmaps = run.load_heatmaps(kind, v, &eval)?;
                    let rel = curve_path(kind, v, metric);
                    let path = run.path(&rel);
                    match metric {
                        Metric::Fidelity => {
                            let mif = perturbation_curves(&model, &eval, &heatmaps, RankOrder::Mif, m.fraction_steps)?;
                            let lif = perturbation_curves(&model, &eval, &heatmaps, RankOrder::Lif, m.fraction_steps)?;
                            write_perturbation_csv(&mif, &lif, &path)?;
                        }
                        Metric::Roc => {
                            let roc = roc_curve_mean(&heatmaps, &masks, m.threshold_count, m.roc_normalization)?;
                            write_roc_csv(&roc, &path)?;
                        }
                        Metric::Dsc => {
                            let curve = dsc_curve_with_regions(&heatmaps, &regions, &masks, &m.percent_grid)?;
                            write_dsc_csv(&curve, &path)?;
                        }
                    }
                    outputs.push(rel);
                }
                run.record(&key, hash, outputs)?;
            }
            Ok(())
        })
    }

    // ---- report ----------------------------------------------------------

    fn report_hash(&self) -> Result<String> {
        let mut lines = Vec::new();
        for kind in self.config.estimators() {
            for metric in Metric::ALL {
                lines.push(self.eval_hash(kind, metric)?);
            }
        }
        Ok(hash_lines(&lines))
    }

    pub fn report(&mut self, mode: Mode) -> Result<()> {
        self.stage("report", |run| {
            let hash = run.report_hash()?;
            if mode == Mode::Cached && run.is_cached("report", &hash) {
                return Ok(());
            }
            let outputs = report::emit_report(run)?;
            run.record("report", hash, outputs)
        })
    }

    /// All stages in order, reusing cached steps.
    pub fn run_all(&mut self) -> Result<RunManifest> {
        self.manifest.failed_stage = None;
        self.gen_data(Mode::Cached)?;
        self.train(Mode::Cached)?;
        self.attribute(Mode::Cached)?;
        self.eval(&Metric::ALL, Mode::Cached)?;
        self.report(Mode::Cached)?;
        self.manifest.complete = true;
        self.manifest.finished_at = Some(now());
        self.save_manifest()?;
        Ok(self.manifest.clone())
    }
}

/// Runs every stage for `config` in its output directory.
pub fn run_pipeline(config: RunConfig) -> Result<RunManifest> {
    Run::open(config)?.run_all()
}
