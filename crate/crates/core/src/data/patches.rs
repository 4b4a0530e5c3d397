use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabelMap;
use crate::error::{Error, Result};
use crate::ops::activation::IGNORE_LABEL;
use crate::tensor::Tensor;

/// Overlapping `S×S×B` patches in raster order of their origins.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub stride: usize,
    /// `(row, col)` of each patch's top-left pixel.
    pub origins: Vec<(usize, usize)>,
    /// `[P, S, S, B]`.
    pub patches: Tensor,
    /// `P·S·S` labels; [`IGNORE_LABEL`] when the cube had none.
    pub labels: Vec<u8>,
}

fn axis_origins(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + size <= len).collect();
    let last = len - size;
    if *v.last().expect("size <= len") != last {
        v.push(last);
    }
    v
}

/// Origins at multiples of `stride`, with a final row/column snapped inward so
/// every pixel is covered.
pub fn patch_origins(rows: usize, cols: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if size == 0 || size > rows || size > cols {
        return Err(Error::precondition(
            "extract_patches",
            format!("patch {size} does not fit a {rows}x{cols} cube"),
        ));
    }
    if stride == 0 || stride > size {
        return Err(Error::precondition("extract_patches", format!("stride {stride} outside 1..={size}")));
    }
    let rs = axis_origins(rows, size, stride);
    let cs = axis_origins(cols, size, stride);
    Ok(rs.iter().flat_map(|&r| cs.iter().map(move |&c| (r, c))).collect())
}

pub fn extract_patches(cube: &Tensor, labels: Option<&LabelMap>, size: usize, stride: usize) -> Result<PatchSet> {
    cube.expect_rank("extract_patches", 3)?;
    let (m, n, b) = (cube.dim(0), cube.dim(1), cube.dim(2));
    let origins = patch_origins(m, n, size, stride)?;
    let mut data = Vec::with_capacity(origins.len() * size * size * b);
    let mut lab = Vec::with_capacity(origins.len() * size * size);
    for &(r0, c0) in &origins {
        for y in 0..size {
            let start = ((r0 + y) * n + c0) * b;
            data.extend_from_slice(&cube.data()[start..start + size * b]);
            for x in 0..size {
                lab.push(labels.map_or(IGNORE_LABEL, |l| l.get(r0 + y, c0 + x)));
            }
        }
    }
    Ok(PatchSet {
        size,
        stride,
        patches: Tensor::new(&[origins.len(), size, size, b], data)?,
        origins,
        labels: lab,
    })
}

/// Patches at `origins` directly in the `[P, B, S, S]` network layout.
pub fn extract_input(cube: &Tensor, origins: &[(usize, usize)], size: usize) -> Result<Tensor> {
    cube.expect_rank("extract_input", 3)?;
    let (m, n, b) = (cube.dim(0), cube.dim(1), cube.dim(2));
    if origins.iter().any(|&(r, c)| r + size > m || c + size > n) {
        return Err(Error::precondition("extract_input", "patch outside the cube"));
    }
    let plane = size * size;
    Ok(Tensor::from_fn(&[origins.len(), b, size, size], |i| {
        let (k, rest) = (i / (b * plane), i % (b * plane));
        let (band, p) = (rest / plane, rest % plane);
        let (r0, c0) = origins[k];
        cube.data()[((r0 + p / size) * n + c0 + p % size) * b + band]
    }))
}

/// Writes every patch back at its origin. Returns the cube and a per-pixel
/// coverage count; uncovered pixels stay zero.
pub fn reassemble(set: &PatchSet, rows: usize, cols: usize) -> Result<(Tensor, Vec<u32>)> {
    let (s, b) = (set.size, set.patches.dim(3));
    let mut out = Tensor::zeros(&[rows, cols, b]);
    let mut cover = vec![0u32; rows * cols];
    for (k, &(r0, c0)) in set.origins.iter().enumerate() {
        if r0 + s > rows || c0 + s > cols {
            return Err(Error::precondition("reassemble", "patch outside the cube"));
        }
        for y in 0..s {
            for x in 0..s {
                let src = ((k * s + y) * s + x) * b;
                let dst = ((r0 + y) * cols + c0 + x) * b;
                out.data_mut()[dst..dst + b].copy_from_slice(&set.patches.data()[src..src + b]);
                cover[(r0 + y) * cols + c0 + x] += 1;
            }
        }
    }
    Ok((out, cover))
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.patches.dim(3)
    }

    /// Selected patches in network layout `[k, B, S, S]` with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<u8>)> {
        let (s, b) = (self.size, self.bands());
        let plane = s * s;
        if indices.iter().any(|&i| i >= self.len()) {
            return Err(Error::precondition("patch_batch", "patch index out of range"));
        }
        let x = Tensor::from_fn(&[indices.len(), b, s, s], |i| {
            let (k, rest) = (i / (b * plane), i % (b * plane));
            let (band, p) = (rest / plane, rest % plane);
            self.patches.data()[(indices[k] * plane + p) * b + band]
        });
        let labels = indices
            .iter()
            .flat_map(|&k| self.labels[k * plane..(k + 1) * plane].iter().copied())
            .collect();
        Ok((x, labels))
    }
}

/// Seeded split of `0..count` into sorted `(train, validation)` indices with
/// `round(train_fraction · count)` training items, at least one in each part
/// when `count ≥ 2`.
pub fn split_indices(count: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if count < 2 {
        return Err(Error::precondition("split", "need at least two patches"));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::precondition("split", "train fraction outside [0, 1]"));
    }
    let n_train = ((train_fraction * count as f64).round() as usize).clamp(1, count - 1);
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}
