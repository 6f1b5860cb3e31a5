//! End-to-end runs of the stage pipeline on a small configuration.

mod common;

use std::fs;
use std::path::Path;
use std::time::SystemTime;

use saliency_core::bench::{run_pipeline, Metric, Mode, Run, RunConfig, RunManifest};
use saliency_core::Error;

fn small_config(out: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 3
out = "{}"
data.n = 200
data.eval_size = 20
data.scene.side = 32
data.scene.vessel_radius = {{ lo = 1.0, hi = 2.5 }}
model.input_side = 32
model.epochs = 1
attribute.estimators = ["backprop", "smoothgrad", "intgrad"]
attribute.params.noise_samples = 4
attribute.params.steps = 5
metrics.fraction_steps = 10
metrics.threshold_count = 11
"#,
        out.display()
    );
    RunConfig::from_toml_str(&text).unwrap()
}

fn mtime(path: &Path) -> SystemTime {
    fs::metadata(path).unwrap().modified().unwrap()
}

#[test]
fn full_run_records_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_pipeline(small_config(dir.path())).unwrap();
    assert!(manifest.complete);
    assert!(manifest.failed_stage.is_none());
    for p in manifest.artifact_paths() {
        assert!(dir.path().join(&p).exists(), "{} is missing", p.display());
    }
    let on_disk = RunManifest::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(on_disk, manifest);

    let fidelity = fs::read_to_string(dir.path().join("report/fidelity.csv")).unwrap();
    let rows: Vec<&str> = fidelity.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "three estimators plus the random baseline:\n{fidelity}");
    assert!(rows.iter().any(|r| r.starts_with("Random")));
    for name in ["auc", "dsc"] {
        assert_eq!(fs::read_to_string(dir.path().join(format!("report/{name}.csv"))).unwrap().lines().count(), 5);
    }
}

#[test]
fn changed_estimator_setting_reruns_only_that_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run_pipeline(cfg.clone()).unwrap();
    let bp = dir.path().join("heatmaps/backprop/absolute");
    let sg = dir.path().join("heatmaps/smoothgrad/absolute");
    let first = |d: &Path| d.join(common::list_files(d)[0].clone());
    let (bp_before, sg_before) = (mtime(&first(&bp)), mtime(&first(&sg)));
    let model_before = mtime(&dir.path().join("model/model.bin"));
    std::thread::sleep(std::time::Duration::from_millis(1100));

    let mut changed = cfg;
    changed
        .attribute
        .overrides
        .insert("smoothgrad".into(), toml::from_str("noise_sigma = 0.3").unwrap());
    let manifest = run_pipeline(changed).unwrap();
    assert!(manifest.complete);
    assert_eq!(mtime(&first(&bp)), bp_before);
    assert_eq!(mtime(&dir.path().join("model/model.bin")), model_before);
    assert!(mtime(&first(&sg)) > sg_before);
}

#[test]
fn forced_stages_reproduce_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run_pipeline(cfg.clone()).unwrap();
    let snapshot = |sub: &str| -> Vec<(std::path::PathBuf, Vec<u8>)> {
        let root = dir.path().join(sub);
        common::list_files(&root).into_iter().map(|p| (p.clone(), fs::read(root.join(p)).unwrap())).collect()
    };
    let before = (snapshot("data"), snapshot("model"), snapshot("heatmaps"), snapshot("curves"));
    let mut run = Run::open(cfg).unwrap();
    run.gen_data(Mode::Force).unwrap();
    run.train(Mode::Force).unwrap();
    run.attribute(Mode::Force).unwrap();
    run.eval(&Metric::ALL, Mode::Force).unwrap();
    let after = (snapshot("data"), snapshot("model"), snapshot("heatmaps"), snapshot("curves"));
    assert!(before == after, "forced re-run changed outputs");
}

#[test]
fn unknown_estimator_is_a_validation_error() {
    let err = RunConfig::from_toml_str(r#"attribute.estimators = ["gradcam"]"#).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    let err = RunConfig::from_toml_str("attribute.overrides.gradcam = { steps = 3 }").unwrap_err();
    assert!(matches!(err, Error::Validation(_) | Error::Param(_)), "{err}");
}

#[test]
fn report_without_curves_names_the_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(small_config(dir.path())).unwrap();
    let err = run.report(Mode::Force).unwrap_err();
    let Error::Stage { stage, source } = err else { panic!("not a stage error") };
    assert_eq!(stage, "report");
    assert!(matches!(*source, Error::MissingInputs(ref v) if !v.is_empty()));

    let manifest = RunManifest::load(dir.path().join("manifest.json")).unwrap();
    assert!(!manifest.complete);
    assert_eq!(manifest.failed_stage.as_deref(), Some("report"));
}

#[test]
fn train_without_data_fails_and_persists_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = Run::open(small_config(dir.path())).unwrap();
    assert!(matches!(run.train(Mode::Cached), Err(Error::Stage { stage: "train", .. })));
    let manifest = RunManifest::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.failed_stage.as_deref(), Some("train"));
    assert!(!manifest.complete);
}
