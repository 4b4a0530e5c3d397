use serde::{Deserialize, Serialize};

use super::conv::{batched4, unbatch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Output of a pooling kernel. `argmax` holds, for each output element, the
/// flat input index it was taken from (max mode only).
pub struct Pooled {
    pub value: Tensor,
    pub argmax: Vec<usize>,
}

/// 2×2 window, stride 2. Max ties go to the lowest flat index.
pub fn pool2d(x: &Tensor, mode: PoolMode) -> Result<Pooled> {
    let ([n, c, h, w], squeeze) = batched4("pool2d", x)?;
    if h % 2 != 0 {
        return Err(Error::precondition("pool2d", format!("height {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::precondition("pool2d", format!("width {w} is odd")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::new();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let taps = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                match mode {
                    PoolMode::Max => {
                        let mut best = taps[0];
                        for &t in &taps[1..] {
                            if xd[t] > xd[best] {
                                best = t;
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                    PoolMode::Avg => {
                        out.push(taps.iter().map(|&t| xd[t]).sum::<f64>() / 4.0);
                    }
                }
            }
        }
    }
    let value = unbatch(Tensor::new(&[n, c, oh, ow], out)?, squeeze);
    Ok(Pooled { value, argmax })
}

pub fn pool2d_backward(x_shape: &[usize], gout: &Tensor, mode: PoolMode, argmax: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    match mode {
        PoolMode::Max => {
            for (&src, &g) in argmax.iter().zip(gout.data()) {
                d[src] += g;
            }
        }
        PoolMode::Avg => {
            let w = x_shape[x_shape.len() - 1];
            let h = x_shape[x_shape.len() - 2];
            let (oh, ow) = (h / 2, w / 2);
            for (i, &g) in gout.data().iter().enumerate() {
                let plane = i / (oh * ow);
                let (oy, ox) = ((i % (oh * ow)) / ow, i % ow);
                let base = plane * h * w;
                for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    d[base + (2 * oy + dy) * w + 2 * ox + dxo] += g / 4.0;
                }
            }
        }
    }
    dx
}

/// Per-channel reduction over all spatial positions: `[N,C,...] -> [N,C]`
/// (or `[C,H,W] -> [C]`).
pub fn global_pool(x: &Tensor, mode: PoolMode) -> Result<Pooled> {
    if x.rank() < 2 {
        return Err(Error::dim("global_pool", "rank", 3, x.rank()));
    }
    let (lead, plane): (Vec<usize>, usize) = if x.rank() == 3 {
        (vec![x.dim(0)], x.dim(1) * x.dim(2))
    } else {
        (vec![x.dim(0), x.dim(1)], x.shape()[2..].iter().product())
    };
    let rows: usize = lead.iter().product();
    let xd = x.data();
    let mut out = Vec::with_capacity(rows);
    let mut argmax = Vec::new();
    for r in 0..rows {
        let s = &xd[r * plane..][..plane];
        match mode {
            PoolMode::Avg => out.push(s.iter().sum::<f64>() / plane as f64),
            PoolMode::Max => {
                let mut best = 0;
                for (i, &v) in s.iter().enumerate() {
                    if v > s[best] {
                        best = i;
                    }
                }
                out.push(s[best]);
                argmax.push(r * plane + best);
            }
        }
    }
    Ok(Pooled {
        value: Tensor::new(&lead, out)?,
        argmax,
    })
}

pub fn global_pool_backward(x_shape: &[usize], gout: &Tensor, mode: PoolMode, argmax: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let rows = gout.len();
    let plane = dx.len() / rows;
    let d = dx.data_mut();
    match mode {
        PoolMode::Max => {
            for (&src, &g) in argmax.iter().zip(gout.data()) {
                d[src] += g;
            }
        }
        PoolMode::Avg => {
            for (r, &g) in gout.data().iter().enumerate() {
                d[r * plane..][..plane].iter_mut().for_each(|v| *v += g / plane as f64);
            }
        }
    }
    dx
}

/// Per-position reduction across channels: `[N,C,H,W] -> [N,1,H,W]`.
pub fn channel_pool(x: &Tensor, mode: PoolMode) -> Result<Pooled> {
    x.expect_rank("channel_pool", 4)?;
    let [n, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![0.0; n * plane];
    let mut argmax = Vec::new();
    if mode == PoolMode::Max {
        argmax = vec![0; n * plane];
    }
    for bi in 0..n {
        for p in 0..plane {
            let at = |ci: usize| (bi * c + ci) * plane + p;
            match mode {
                PoolMode::Avg => {
                    out[bi * plane + p] = (0..c).map(|ci| xd[at(ci)]).sum::<f64>() / c as f64;
                }
                PoolMode::Max => {
                    let mut best = at(0);
                    for ci in 1..c {
                        if xd[at(ci)] > xd[best] {
                            best = at(ci);
                        }
                    }
                    out[bi * plane + p] = xd[best];
                    argmax[bi * plane + p] = best;
                }
            }
        }
    }
    Ok(Pooled {
        value: Tensor::new(&[n, 1, h, w], out)?,
        argmax,
    })
}

pub fn channel_pool_backward(x_shape: &[usize], gout: &Tensor, mode: PoolMode, argmax: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let (c, plane) = (x_shape[1], x_shape[2] * x_shape[3]);
    let d = dx.data_mut();
    match mode {
        PoolMode::Max => {
            for (&src, &g) in argmax.iter().zip(gout.data()) {
                d[src] += g;
            }
        }
        PoolMode::Avg => {
            for (i, &g) in gout.data().iter().enumerate() {
                let (bi, p) = (i / plane, i % plane);
                for ci in 0..c {
                    d[(bi * c + ci) * plane + p] += g / c as f64;
                }
            }
        }
    }
    dx
}
