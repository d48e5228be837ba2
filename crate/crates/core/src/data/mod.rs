//! Hyperspectral data pipeline: cube container and I/O, PCA spectral
//! reduction, pixel-centered patch extraction, stratified splits, and the
//! synthetic dataset generator used by the desk-scale experiments.

mod hsic;
mod patch;
mod pca;
mod split;
mod synth;

pub use hsic::{load_cube, save_cube, write_cube};
pub use patch::{extract_patch, extract_patches, reflect_index, PatchSet};
pub use pca::{pca_reduce, ReducedCube};
pub use split::{stratified_split, ClassCounts, SplitSpec};
pub use synth::synth_dataset;

use crate::error::{Error, Result};
use crate::Real;

/// Raw hyperspectral cube with a per-pixel label map.
///
/// Radiance is `[row][col][band]` row-major; label 0 means unlabeled and
/// class ids are 1-based indices into `class_names`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub radiance: Vec<Real>,
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
    pub provenance: serde_json::Value,
}

impl HsiCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        radiance: Vec<Real>,
        labels: Vec<u16>,
        class_names: Vec<String>,
        provenance: serde_json::Value,
    ) -> Result<HsiCube> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::invalid("HsiCube requires positive extents"));
        }
        if radiance.len() != height * width * bands {
            return Err(Error::shape(
                "HsiCube",
                format!("{} radiance values", height * width * bands),
                format!("{}", radiance.len()),
            ));
        }
        if labels.len() != height * width {
            return Err(Error::shape(
                "HsiCube",
                format!("{} labels", height * width),
                format!("{}", labels.len()),
            ));
        }
        if !radiance.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("HsiCube radiance"));
        }
        let classes = class_names.len() as u16;
        if let Some(&bad) = labels.iter().find(|&&l| l > classes) {
            return Err(Error::invalid(format!(
                "label {bad} exceeds declared class count {classes}"
            )));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            radiance,
            labels,
            class_names,
            provenance,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[Real] {
        let off = (row * self.width + col) * self.bands;
        &self.radiance[off..off + self.bands]
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}
