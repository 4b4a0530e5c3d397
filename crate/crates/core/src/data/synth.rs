use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HsiCube, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub classes: usize,
    /// Standard deviation of additive white noise.
    pub noise: f64,
    /// Largest share of a neighboring class blended into boundary pixels, in `[0, 0.5)`.
    pub mixing: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rows: 64,
            cols: 64,
            bands: 100,
            classes: 6,
            noise: 0.01,
            mixing: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub cube: HsiCube,
    /// `[C, D]` noise-free class spectra.
    pub prototypes: Tensor,
}

/// Width in pixels of the blended strip along region boundaries.
const BLEND_WIDTH: f64 = 1.5;

/// Smooth spectra: a constant floor plus a few Gaussian bumps.
fn prototypes(rng: &mut ChaCha8Rng, classes: usize, bands: usize) -> Tensor {
    let d = bands as f64;
    let mut out = Vec::with_capacity(classes * bands);
    for _ in 0..classes {
        let floor = rng.random_range(0.1..0.3);
        let bumps: Vec<(f64, f64, f64)> = (0..rng.random_range(3..=5))
            .map(|_| {
                (
                    rng.random_range(0.0..d),
                    rng.random_range(d / 12.0..d / 4.0),
                    rng.random_range(0.05..0.45),
                )
            })
            .collect();
        for i in 0..bands {
            let x = i as f64;
            let v: f64 = bumps
                .iter()
                .map(|&(mu, w, a)| a * (-0.5 * ((x - mu) / w).powi(2)).exp())
                .sum();
            out.push(floor + v);
        }
    }
    Tensor::new(&[classes, bands], out).expect("nonzero extents")
}

/// Voronoi scene over `3·C` random sites; the first `C` sites carry every
/// class once so all classes appear.
pub fn synth_scene(seed: u64, cfg: &SynthConfig) -> Result<SynthScene> {
    let SynthConfig {
        rows,
        cols,
        bands,
        classes,
        noise,
        mixing,
    } = *cfg;
    if classes < 2 || classes > 255 {
        return Err(Error::precondition("synth_scene", "classes must be in 2..=255"));
    }
    if rows == 0 || cols == 0 || bands == 0 {
        return Err(Error::precondition("synth_scene", "scene extents must be positive"));
    }
    if !(0.0..0.5).contains(&mixing) || noise < 0.0 {
        return Err(Error::precondition("synth_scene", "mixing must lie in [0, 0.5) and noise be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(&mut rng, classes, bands);
    let sites: Vec<(f64, f64, usize)> = (0..3 * classes)
        .map(|i| {
            let class = if i < classes { i } else { rng.random_range(0..classes) };
            (rng.random_range(0.0..rows as f64), rng.random_range(0.0..cols as f64), class)
        })
        .collect();
    let gauss = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut labels = Vec::with_capacity(rows * cols);
    let mut data = Vec::with_capacity(rows * cols * bands);
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let dist = |&(sy, sx, class): &(f64, f64, usize)| (((y - sy).powi(2) + (x - sx).powi(2)).sqrt(), class);
            let closer = |a: (f64, usize), b: (f64, usize)| if b.0 < a.0 { b } else { a };
            let near = sites.iter().map(dist).fold((f64::INFINITY, 0), closer);
            let second = sites
                .iter()
                .filter(|s| s.2 != near.1)
                .map(dist)
                .fold((f64::INFINITY, near.1), closer);
            let gap = (second.0 - near.0) / 2.0;
            let w = if mixing > 0.0 && gap < BLEND_WIDTH {
                mixing * (1.0 - gap / BLEND_WIDTH)
            } else {
                0.0
            };
            labels.push(near.1 as u8);
            let (pa, pb) = (
                &protos.data()[near.1 * bands..][..bands],
                &protos.data()[second.1 * bands..][..bands],
            );
            for i in 0..bands {
                let n = if noise > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
                data.push((1.0 - w) * pa[i] + w * pb[i] + n);
            }
        }
    }
    let cube = HsiCube::new(
        Tensor::new(&[rows, cols, bands], data)?,
        Some(LabelMap::new(rows, cols, labels)?),
        classes,
    )?;
    Ok(SynthScene { cube, prototypes: protos })
}

/// Share of labeled pixels whose nearest prototype (Euclidean) is their class.
pub fn nearest_prototype_accuracy(cube: &HsiCube, prototypes: &Tensor) -> f64 {
    let Some(labels) = &cube.labels else {
        return 0.0;
    };
    let (c, d) = (prototypes.dim(0), prototypes.dim(1));
    let mut hit = 0usize;
    let mut total = 0usize;
    for r in 0..cube.rows() {
        for q in 0..cube.cols() {
            let l = labels.get(r, q);
            if l as usize >= c {
                continue;
            }
            let px = cube.pixel(r, q);
            let dist = |k: usize| -> f64 {
                px.iter()
                    .zip(&prototypes.data()[k * d..][..d])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum()
            };
            let best = (1..c).fold(0, |best, k| if dist(k) < dist(best) { k } else { best });
            hit += (best == l as usize) as usize;
            total += 1;
        }
    }
    hit as f64 / total.max(1) as f64
}
