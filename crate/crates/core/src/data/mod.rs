//! Band reduction, patch extraction, synthetic scenes, and raster I/O.

mod eigen;
mod io;
mod patches;
mod pca;
mod ppm;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::activation::IGNORE_LABEL;
use crate::tensor::Tensor;

pub use eigen::{jacobi_eigen, SymmetricEigen};
pub use io::{read_cube, read_header, read_labels, write_cube, write_labels, CubeHeader};
pub use patches::{extract_input, extract_patches, patch_origins, reassemble, split_indices, PatchSet};
pub use pca::{pca_fit, pca_fit_pixels, PcaModel};
pub use ppm::{default_palette, parse_ppm, write_ppm, Palette};
pub use synth::{nearest_prototype_accuracy, synth_scene, SynthConfig, SynthScene};

/// Row-major per-pixel class ids; [`IGNORE_LABEL`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("label_map", "pixels", rows * cols, data.len()));
        }
        Ok(LabelMap { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: u8) -> Self {
        LabelMap {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.cols + c]
    }

    /// Errors if any label is neither below `classes` nor the ignore value.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE_LABEL && v as usize >= classes) {
            Some(v) => Err(Error::precondition(
                "label_map",
                format!("label {v} outside 0..{classes}"),
            )),
            None => Ok(()),
        }
    }
}

/// Reflectance cube `[M, N, D]` with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub data: Tensor,
    pub labels: Option<LabelMap>,
    pub classes: usize,
}

impl HsiCube {
    pub fn new(data: Tensor, labels: Option<LabelMap>, classes: usize) -> Result<Self> {
        data.expect_rank("hsi_cube", 3)?;
        if let Some(l) = &labels {
            if (l.rows, l.cols) != (data.dim(0), data.dim(1)) {
                return Err(Error::Shape {
                    op: "hsi_cube",
                    lhs: data.shape()[..2].to_vec(),
                    rhs: vec![l.rows, l.cols],
                });
            }
            l.check_classes(classes)?;
        }
        Ok(HsiCube { data, labels, classes })
    }

    pub fn rows(&self) -> usize {
        self.data.dim(0)
    }

    pub fn cols(&self) -> usize {
        self.data.dim(1)
    }

    pub fn bands(&self) -> usize {
        self.data.dim(2)
    }

    /// Spectrum of pixel `(r, c)`.
    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let d = self.bands();
        &self.data.data()[(r * self.cols() + c) * d..][..d]
    }
}
