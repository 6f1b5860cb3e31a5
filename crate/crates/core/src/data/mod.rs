//! Synthetic labeled images, PGM file I/O and the dataset manifest.

pub mod pgm;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use synth::{
    generate_dataset, generate_dataset_with_split, render_scene, Dataset, LabeledSample, Range, SceneParams, Split,
    SplitPlan,
};

/// One row of the dataset manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: usize,
    pub image_path: String,
    pub mask_path: String,
    pub label: u8,
    pub split: Split,
}

/// Writes every sample as `images/<id>.pgm` and `masks/<id>.pgm` under `dir`
/// plus `manifest.csv` with paths relative to `dir`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    for s in &dataset.samples {
        let row = ManifestRow {
            id: s.id,
            image_path: format!("images/{:05}.pgm", s.id),
            mask_path: format!("masks/{:05}.pgm", s.id),
            label: s.label,
            split: s.split,
        };
        pgm::write_image_pgm(&s.image, dir.join(&row.image_path))?;
        pgm::write_mask_pgm(&s.mask, dir.join(&row.mask_path))?;
        w.serialize(&row).map_err(|e| csv_err(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Loads a dataset from a manifest; relative paths resolve against the
/// manifest's directory.
pub fn read_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(manifest).map_err(|e| csv_err(manifest, e))?;
    let mut samples = Vec::new();
    for row in r.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| csv_err(manifest, e))?;
        if row.label > 1 {
            return Err(Error::Validation(format!("sample {} has label {}", row.id, row.label)));
        }
        let image = pgm::read_image_pgm(base.join(&row.image_path))?;
        let mask = pgm::read_mask_pgm(base.join(&row.mask_path))?;
        crate::grid::check_dims(&image, &mask, "image/mask")?;
        samples.push(LabeledSample {
            id: row.id,
            image,
            label: row.label,
            mask,
            split: row.split,
        });
    }
    Ok(Dataset { samples })
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
