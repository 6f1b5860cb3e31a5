//! Toolkit for training a small grayscale image classifier, computing
//! pixel-importance maps over its predictions, and scoring those maps with
//! perturbation fidelity, ROC concordance against ground-truth masks, and
//! region-based Dice overlap.

pub mod bench;
mod binio;
pub mod data;
pub mod estimators;
pub mod error;
pub mod grid;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod segmentation;

pub use error::{DecodeError, Error, Result};
pub use grid::{Grid, Image, MaskImage};
