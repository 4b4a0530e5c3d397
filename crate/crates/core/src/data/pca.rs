use serde::{Deserialize, Serialize};

use super::eigen::jacobi_eigen;
use super::HsiCube;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Principal-component projection of `D` bands onto `B` components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Row-major `D×B`; columns are orthonormal components.
    pub components: Vec<f64>,
    /// Variances along each component, nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// Divide each projected band by its standard deviation.
    pub standardize: bool,
}

impl PcaModel {
    pub fn in_bands(&self) -> usize {
        self.mean.len()
    }

    pub fn out_bands(&self) -> usize {
        self.eigenvalues.len()
    }

    fn scales(&self) -> Vec<f64> {
        let floor = self.eigenvalues.first().copied().unwrap_or(1.0) * 1e-12;
        self.eigenvalues
            .iter()
            .map(|&v| if self.standardize { v.max(floor).sqrt() } else { 1.0 })
            .collect()
    }

    /// Projects one spectrum.
    pub fn project(&self, pixel: &[f64]) -> Vec<f64> {
        let (d, b) = (self.in_bands(), self.out_bands());
        let scales = self.scales();
        (0..b)
            .map(|j| {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += (pixel[i] - self.mean[i]) * self.components[i * b + j];
                }
                acc / scales[j]
            })
            .collect()
    }

    /// `[M, N, D] -> [M, N, B]`.
    pub fn apply(&self, cube: &Tensor) -> Result<Tensor> {
        cube.expect_rank("pca_apply", 3)?;
        let d = cube.dim(2);
        if d != self.in_bands() {
            return Err(Error::dim("pca_apply", "bands", self.in_bands(), d));
        }
        let b = self.out_bands();
        let mut out = Vec::with_capacity(cube.len() / d * b);
        for px in cube.data().chunks(d) {
            out.extend(self.project(px));
        }
        Tensor::new(&[cube.dim(0), cube.dim(1), b], out)
    }

    /// Maps reduced `[M, N, B]` data back to band space.
    pub fn inverse(&self, reduced: &Tensor) -> Result<Tensor> {
        reduced.expect_rank("pca_inverse", 3)?;
        let (d, b) = (self.in_bands(), self.out_bands());
        if reduced.dim(2) != b {
            return Err(Error::dim("pca_inverse", "bands", b, reduced.dim(2)));
        }
        let scales = self.scales();
        let mut out = Vec::with_capacity(reduced.len() / b * d);
        for z in reduced.data().chunks(b) {
            for i in 0..d {
                let mut acc = self.mean[i];
                for j in 0..b {
                    acc += self.components[i * b + j] * z[j] * scales[j];
                }
                out.push(acc);
            }
        }
        Tensor::new(&[reduced.dim(0), reduced.dim(1), d], out)
    }
}

/// Fits on `n` pixels of `d` bands stored pixel-major.
pub fn pca_fit_pixels(pixels: &[f64], d: usize, b: usize, standardize: bool) -> Result<PcaModel> {
    if d == 0 || pixels.len() % d != 0 {
        return Err(Error::precondition("pca_fit", "pixel buffer is not a whole number of spectra"));
    }
    if b == 0 || b > d {
        return Err(Error::precondition("pca_fit", format!("cannot keep {b} of {d} bands")));
    }
    let n = pixels.len() / d;
    if n < b + 1 {
        return Err(Error::precondition("pca_fit", format!("need at least {} pixels, got {n}", b + 1)));
    }
    let mut mean = vec![0.0; d];
    for px in pixels.chunks(d) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for px in pixels.chunks(d) {
        for i in 0..d {
            centered[i] = px[i] - mean[i];
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    if (0..d).all(|i| cov[i * d + i] == 0.0) {
        return Err(Error::precondition("pca_fit", "every pixel has the same spectrum"));
    }
    let eig = jacobi_eigen(&cov, d)?;
    let mut components = vec![0.0; d * b];
    for i in 0..d {
        for j in 0..b {
            components[i * b + j] = eig.vectors[i * d + j];
        }
    }
    let eigenvalues = eig.values[..b].iter().map(|v| v.max(0.0)).collect();
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        standardize,
    })
}

pub fn pca_fit(cube: &HsiCube, b: usize, standardize: bool) -> Result<PcaModel> {
    pca_fit_pixels(cube.data.data(), cube.bands(), b, standardize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pixels(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = Tensor::randn(&[d, d], 1.0, &mut rng);
        let z = Tensor::randn(&[n, d], 1.0, &mut rng);
        (0..n * d)
            .map(|i| {
                let (r, c) = (i / d, i % d);
                (0..d).map(|k| z.data()[r * d + k] * mix.data()[k * d + c]).sum::<f64>() + c as f64
            })
            .collect()
    }

    #[test]
    fn components_are_orthonormal_and_ordered() {
        let px = random_pixels(200, 8, 1);
        let m = pca_fit_pixels(&px, 8, 5, false).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let dot: f64 = (0..8).map(|i| m.components[i * 5 + a] * m.components[i * 5 + b]).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn mean_pixel_projects_to_zero() {
        let px = random_pixels(100, 6, 2);
        for standardize in [false, true] {
            let m = pca_fit_pixels(&px, 6, 3, standardize).unwrap();
            assert!(m.project(&m.mean).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn full_basis_round_trips() {
        let px = random_pixels(60, 5, 3);
        let cube = Tensor::new(&[6, 10, 5], px).unwrap();
        for standardize in [false, true] {
            let m = pca_fit_pixels(cube.data(), 5, 5, standardize).unwrap();
            let back = m.inverse(&m.apply(&cube).unwrap()).unwrap();
            assert!(back.max_abs_diff(&cube) < 1e-8);
        }
    }

    #[test]
    fn standardized_bands_have_unit_variance() {
        let px = random_pixels(300, 6, 4);
        let cube = Tensor::new(&[30, 10, 6], px).unwrap();
        let m = pca_fit_pixels(cube.data(), 6, 4, true).unwrap();
        let z = m.apply(&cube).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = z.data().chunks(4).map(|p| p[j]).collect();
            let mean = col.iter().sum::<f64>() / 300.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 300.0;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn argument_errors() {
        let px = random_pixels(10, 4, 5);
        assert!(pca_fit_pixels(&px, 4, 5, false).is_err());
        assert!(pca_fit_pixels(&px[..12], 4, 3, false).is_err());
        assert!(pca_fit_pixels(&[1.0; 40], 4, 2, false).is_err());
        let m = pca_fit_pixels(&px, 4, 2, false).unwrap();
        assert!(m.apply(&Tensor::zeros(&[2, 2, 3])).is_err());
    }
}
