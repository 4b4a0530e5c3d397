//! Scene-level pipeline: split patches, fit PCA on the training pixels,
//! reduce the cube, and train.

use serde::{Deserialize, Serialize};

use crate::data::{extract_patches, patch_origins, pca_fit_pixels, split_indices, HsiCube, PatchSet, PcaModel};
use crate::error::{Error, Result, StageExt};
use crate::network::{Model, NetworkConfig};
use crate::tensor::Tensor;
use crate::train::{train, EpochRecord, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub train_fraction: f64,
    /// Scale PCA outputs to unit variance.
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            patch_size: 32,
            stride: 16,
            train_fraction: 0.7,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment {
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        let s = self.data.patch_size;
        let unit = self.network.size_unit();
        if s == 0 || s % unit != 0 {
            return Err(Error::precondition(
                "config",
                format!("patch size {s} must be a positive multiple of {unit}"),
            ));
        }
        if self.data.stride == 0 || self.data.stride > s {
            return Err(Error::precondition("config", "stride must lie in 1..=patch size"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub pca: PcaModel,
    /// PCA-reduced cube `[M, N, B]`.
    pub reduced: Tensor,
    pub patches: PatchSet,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn prepare(cube: &HsiCube, exp: &Experiment) -> Result<Prepared> {
    exp.validate()?;
    let labels = cube
        .labels
        .as_ref()
        .ok_or_else(|| Error::precondition("prepare", "training cube has no labels"))?;
    if cube.classes != exp.network.classes {
        return Err(Error::dim("prepare", "classes", exp.network.classes, cube.classes));
    }
    let (m, n, d) = (cube.rows(), cube.cols(), cube.bands());
    let DataConfig {
        patch_size: s,
        stride,
        train_fraction,
        standardize,
    } = exp.data;
    let origins = patch_origins(m, n, s, stride).stage("patches")?;
    let (train, val) = split_indices(origins.len(), train_fraction, exp.train.seed).stage("split")?;

    let mut covered = vec![false; m * n];
    for &k in &train {
        let (r0, c0) = origins[k];
        for r in r0..r0 + s {
            covered[r * n + c0..r * n + c0 + s].fill(true);
        }
    }
    let pixels: Vec<f64> = covered
        .iter()
        .enumerate()
        .filter(|(_, &c)| c)
        .flat_map(|(p, _)| cube.data.data()[p * d..(p + 1) * d].iter().copied())
        .collect();
    let pca = pca_fit_pixels(&pixels, d, exp.network.bands, standardize).stage("pca")?;
    let reduced = pca.apply(&cube.data).stage("pca")?;
    let patches = extract_patches(&reduced, Some(labels), s, stride).stage("patches")?;
    Ok(Prepared {
        pca,
        reduced,
        patches,
        train,
        val,
    })
}

/// Builds the model from the experiment seed and trains it.
pub fn run(cube: &HsiCube, exp: &Experiment, on_epoch: impl FnMut(&EpochRecord)) -> Result<(Prepared, TrainOutcome)> {
    let prep = prepare(cube, exp)?;
    let mut model = Model::new(exp.network.clone(), exp.train.seed)?;
    let outcome = train(&mut model, &prep.patches, &prep.train, &prep.val, &exp.train, on_epoch)?;
    Ok((prep, outcome))
}
