//! Direct (loop-order) convolution kernels with hand-written backward passes.
//!
//! Every kernel accumulates an output element as `bias + Σ_ci Σ_kz Σ_ky Σ_kx w·x`
//! in exactly that order, skipping padded taps, so a naive nested-loop
//! reference reproduces results bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
    /// Zero padding of `kernel / 2` on each side; requires odd kernels.
    Same,
}

impl Padding {
    fn amount(self, op: &'static str, kernel: usize) -> Result<usize> {
        match self {
            Padding::Valid => Ok(0),
            Padding::Same if kernel % 2 == 1 => Ok(kernel / 2),
            Padding::Same => Err(Error::precondition(
                op,
                format!("same padding needs an odd kernel, got {kernel}"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub groups: usize,
    pub padding: Padding,
}

impl Conv2dSpec {
    /// Square kernel, dense channel mixing, same padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            groups: 1,
            padding: Padding::Same,
        }
    }

    /// One filter per channel.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self::new(channels, channels, kernel).with_groups(channels)
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    fn validate(&self) -> Result<()> {
        let g = self.groups;
        if g == 0 || self.in_channels % g != 0 || self.out_channels % g != 0 {
            return Err(Error::precondition(
                "conv2d",
                format!(
                    "groups {g} must divide in_channels {} and out_channels {}",
                    self.in_channels, self.out_channels
                ),
            ));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::precondition("conv2d", "kernel extents must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (depth, height, width)
    pub kernel: (usize, usize, usize),
    pub depth_stride: usize,
    pub padding: Padding,
}

impl Conv3dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize, usize)) -> Self {
        Conv3dSpec {
            in_channels,
            out_channels,
            kernel,
            depth_stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn with_depth_stride(mut self, stride: usize) -> Self {
        self.depth_stride = stride;
        self
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
            self.kernel.2,
        ]
    }

    /// Output depth for an input of depth `d`.
    pub fn out_depth(&self, d: usize) -> Result<usize> {
        let pad = self.padding.amount("conv3d", self.kernel.0)?;
        let span = d + 2 * pad;
        if span < self.kernel.0 || self.depth_stride == 0 {
            return Err(Error::precondition("conv3d", "depth smaller than kernel"));
        }
        Ok((span - self.kernel.0) / self.depth_stride + 1)
    }
}

/// Views a rank-3 `[C,H,W]` or rank-4 `[N,C,H,W]` tensor as batched.
pub(crate) fn batched4(op: &'static str, x: &Tensor) -> Result<([usize; 4], bool)> {
    match *x.shape() {
        [c, h, w] => Ok(([1, c, h, w], true)),
        [n, c, h, w] => Ok(([n, c, h, w], false)),
        _ => Err(Error::dim(op, "rank", 4, x.rank())),
    }
}

pub(crate) fn unbatch(t: Tensor, squeeze: bool) -> Tensor {
    if squeeze {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s).expect("squeeze of leading unit axis")
    } else {
        t
    }
}

struct Geom2 {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
}

fn geom2(x_shape: [usize; 4], w: &Tensor, spec: &Conv2dSpec) -> Result<Geom2> {
    spec.validate()?;
    let [n, cin, h, wd] = x_shape;
    if cin != spec.in_channels {
        return Err(Error::dim("conv2d", "in_channels", spec.in_channels, cin));
    }
    let ws = spec.weight_shape();
    if w.shape() != ws {
        return Err(Error::Shape {
            op: "conv2d weight",
            lhs: ws.to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (kh, kw) = spec.kernel;
    let ph = spec.padding.amount("conv2d", kh)?;
    let pw = spec.padding.amount("conv2d", kw)?;
    if h + 2 * ph < kh {
        return Err(Error::dim("conv2d", "height", kh, h + 2 * ph));
    }
    if wd + 2 * pw < kw {
        return Err(Error::dim("conv2d", "width", kw, wd + 2 * pw));
    }
    Ok(Geom2 {
        n,
        cin,
        h,
        w: wd,
        cout: spec.out_channels,
        kh,
        kw,
        ph,
        pw,
        oh: h + 2 * ph - kh + 1,
        ow: wd + 2 * pw - kw + 1,
        cin_g: cin / spec.groups,
        cout_g: spec.out_channels / spec.groups,
    })
}

fn check_bias(op: &'static str, b: Option<&Tensor>, cout: usize) -> Result<()> {
    if let Some(b) = b {
        if b.len() != cout {
            return Err(Error::dim(op, "bias", cout, b.len()));
        }
    }
    Ok(())
}

/// Valid output index range `[lo, hi)` for a tap at offset `k` with padding `p`.
#[inline]
fn tap_range(k: usize, p: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = p.saturating_sub(k);
    let hi = (input + p).saturating_sub(k).min(output);
    (lo, hi.max(lo))
}

/// 2D cross-correlation. `x` is `[N,C,H,W]` or `[C,H,W]`; weights are
/// `[C_out, C_in/groups, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &Conv2dSpec) -> Result<Tensor> {
    let (xs, squeeze) = batched4("conv2d", x)?;
    let g = geom2(xs, w, spec)?;
    check_bias("conv2d", b, g.cout)?;
    let xd = x.data();
    let wd = w.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.cout * plane_out];
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (bi, co) = (idx / g.cout, idx % g.cout);
            let grp = co / g.cout_g;
            plane.fill(b.map_or(0.0, |b| b.data()[co]));
            for cig in 0..g.cin_g {
                let ci = grp * g.cin_g + cig;
                let xp = &xd[(bi * g.cin + ci) * plane_in..][..plane_in];
                let wbase = (co * g.cin_g + cig) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = tap_range(ky, g.ph, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wd[wbase + ky * g.kw + kx];
                        let (ox_lo, ox_hi) = tap_range(kx, g.pw, g.w, g.ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.ph;
                            let orow = &mut plane[oy * g.ow..][..g.ow];
                            let xrow = &xp[iy * g.w..][..g.w];
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * xrow[ox + kx - g.pw];
                            }
                        }
                    }
                }
            }
        });
    let t = Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)?;
    Ok(unbatch(t, squeeze))
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    spec: &Conv2dSpec,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads> {
    let (xs, squeeze) = batched4("conv2d_backward", x)?;
    let g = geom2(xs, w, spec)?;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    if gout.len() != g.n * g.cout * plane_out {
        return Err(Error::dim("conv2d_backward", "grad", g.n * g.cout * plane_out, gout.len()));
    }
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();

    let dx = if need_dx {
        let mut dx = vec![0.0; g.n * g.cin * plane_in];
        dx.par_chunks_mut(plane_in)
            .enumerate()
            .for_each(|(idx, plane)| {
                let (bi, ci) = (idx / g.cin, idx % g.cin);
                let grp = ci / g.cin_g;
                let cig = ci % g.cin_g;
                for co in grp * g.cout_g..(grp + 1) * g.cout_g {
                    let gp = &gd[(bi * g.cout + co) * plane_out..][..plane_out];
                    let wbase = (co * g.cin_g + cig) * g.kh * g.kw;
                    for ky in 0..g.kh {
                        let (oy_lo, oy_hi) = tap_range(ky, g.ph, g.h, g.oh);
                        for kx in 0..g.kw {
                            let wv = wd[wbase + ky * g.kw + kx];
                            let (ox_lo, ox_hi) = tap_range(kx, g.pw, g.w, g.ow);
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - g.ph;
                                let drow = &mut plane[iy * g.w..][..g.w];
                                let grow = &gp[oy * g.ow..][..g.ow];
                                for ox in ox_lo..ox_hi {
                                    drow[ox + kx - g.pw] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            });
        let shape = if squeeze {
            vec![g.cin, g.h, g.w]
        } else {
            vec![g.n, g.cin, g.h, g.w]
        };
        Some(Tensor::new(&shape, dx)?)
    } else {
        None
    };

    let per_out = g.cin_g * g.kh * g.kw;
    let dw = if need_dw {
        let mut dw = vec![0.0; g.cout * per_out];
        dw.par_chunks_mut(per_out).enumerate().for_each(|(co, wrow)| {
            let grp = co / g.cout_g;
            for bi in 0..g.n {
                let gp = &gd[(bi * g.cout + co) * plane_out..][..plane_out];
                for cig in 0..g.cin_g {
                    let ci = grp * g.cin_g + cig;
                    let xp = &xd[(bi * g.cin + ci) * plane_in..][..plane_in];
                    for ky in 0..g.kh {
                        let (oy_lo, oy_hi) = tap_range(ky, g.ph, g.h, g.oh);
                        for kx in 0..g.kw {
                            let (ox_lo, ox_hi) = tap_range(kx, g.pw, g.w, g.ow);
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - g.ph;
                                let xrow = &xp[iy * g.w..][..g.w];
                                let grow = &gp[oy * g.ow..][..g.ow];
                                for ox in ox_lo..ox_hi {
                                    acc += grow[ox] * xrow[ox + kx - g.pw];
                                }
                            }
                            wrow[(cig * g.kh + ky) * g.kw + kx] += acc;
                        }
                    }
                }
            }
        });
        Some(Tensor::new(w.shape(), dw)?)
    } else {
        None
    };

    let db = channel_sums(gd, g.n, g.cout, plane_out);
    Ok(ConvGrads { dx, dw, db })
}

fn channel_sums(gd: &[f64], n: usize, c: usize, plane: usize) -> Tensor {
    let mut db = vec![0.0; c];
    for bi in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += gd[(bi * c + co) * plane..][..plane].iter().sum::<f64>();
        }
    }
    Tensor::new(&[c], db).expect("positive channel count")
}

struct Geom3 {
    n: usize,
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    cout: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    pd: usize,
    ph: usize,
    pw: usize,
    sd: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

fn geom3(x: &Tensor, w: &Tensor, spec: &Conv3dSpec) -> Result<Geom3> {
    x.expect_rank("conv3d", 5)?;
    let [n, cin, d, h, wd] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)];
    if cin != spec.in_channels {
        return Err(Error::dim("conv3d", "in_channels", spec.in_channels, cin));
    }
    let ws = spec.weight_shape();
    if w.shape() != ws {
        return Err(Error::Shape {
            op: "conv3d weight",
            lhs: ws.to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (kd, kh, kw) = spec.kernel;
    let pd = spec.padding.amount("conv3d", kd)?;
    let ph = spec.padding.amount("conv3d", kh)?;
    let pw = spec.padding.amount("conv3d", kw)?;
    let od = spec.out_depth(d)?;
    if h + 2 * ph < kh || wd + 2 * pw < kw {
        return Err(Error::precondition("conv3d", "spatial extent smaller than kernel"));
    }
    Ok(Geom3 {
        n,
        cin,
        d,
        h,
        w: wd,
        cout: spec.out_channels,
        kd,
        kh,
        kw,
        pd,
        ph,
        pw,
        sd: spec.depth_stride,
        od,
        oh: h + 2 * ph - kh + 1,
        ow: wd + 2 * pw - kw + 1,
    })
}

impl Geom3 {
    /// Output depth indices that read input depth `od * sd + kz - pd` in range.
    fn depth_taps(&self, kz: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.od).filter_map(move |o| {
            let iz = (o * self.sd + kz).checked_sub(self.pd)?;
            (iz < self.d).then_some((o, iz))
        })
    }
}

/// 3D cross-correlation over `[N, C, D, H, W]` with a stride along depth only.
pub fn conv3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &Conv3dSpec) -> Result<Tensor> {
    let g = geom3(x, w, spec)?;
    check_bias("conv3d", b, g.cout)?;
    let xd = x.data();
    let wd = w.data();
    let vol_in = g.d * g.h * g.w;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let vol_out = g.od * plane_out;
    let mut out = vec![0.0; g.n * g.cout * vol_out];
    out.par_chunks_mut(vol_out).enumerate().for_each(|(idx, vol)| {
        let (bi, co) = (idx / g.cout, idx % g.cout);
        vol.fill(b.map_or(0.0, |b| b.data()[co]));
        for ci in 0..g.cin {
            let xv = &xd[(bi * g.cin + ci) * vol_in..][..vol_in];
            let wbase = (co * g.cin + ci) * g.kd * g.kh * g.kw;
            for kz in 0..g.kd {
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = tap_range(ky, g.ph, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wd[wbase + (kz * g.kh + ky) * g.kw + kx];
                        let (ox_lo, ox_hi) = tap_range(kx, g.pw, g.w, g.ow);
                        for (oz, iz) in g.depth_taps(kz) {
                            let xp = &xv[iz * plane_in..][..plane_in];
                            let op = &mut vol[oz * plane_out..][..plane_out];
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - g.ph;
                                let orow = &mut op[oy * g.ow..][..g.ow];
                                let xrow = &xp[iy * g.w..][..g.w];
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * xrow[ox + kx - g.pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(&[g.n, g.cout, g.od, g.oh, g.ow], out)
}

pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    spec: &Conv3dSpec,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads> {
    let g = geom3(x, w, spec)?;
    let vol_in = g.d * g.h * g.w;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let vol_out = g.od * plane_out;
    if gout.len() != g.n * g.cout * vol_out {
        return Err(Error::dim("conv3d_backward", "grad", g.n * g.cout * vol_out, gout.len()));
    }
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    let ksize = g.kd * g.kh * g.kw;

    let dx = if need_dx {
        let mut dx = vec![0.0; g.n * g.cin * vol_in];
        dx.par_chunks_mut(vol_in).enumerate().for_each(|(idx, vol)| {
            let (bi, ci) = (idx / g.cin, idx % g.cin);
            for co in 0..g.cout {
                let gv = &gd[(bi * g.cout + co) * vol_out..][..vol_out];
                let wbase = (co * g.cin + ci) * ksize;
                for kz in 0..g.kd {
                    for ky in 0..g.kh {
                        let (oy_lo, oy_hi) = tap_range(ky, g.ph, g.h, g.oh);
                        for kx in 0..g.kw {
                            let wv = wd[wbase + (kz * g.kh + ky) * g.kw + kx];
                            let (ox_lo, ox_hi) = tap_range(kx, g.pw, g.w, g.ow);
                            for (oz, iz) in g.depth_taps(kz) {
                                let dp = &mut vol[iz * plane_in..][..plane_in];
                                let gp = &gv[oz * plane_out..][..plane_out];
                                for oy in oy_lo..oy_hi {
                                    let iy = oy + ky - g.ph;
                                    let drow = &mut dp[iy * g.w..][..g.w];
                                    let grow = &gp[oy * g.ow..][..g.ow];
                                    for ox in ox_lo..ox_hi {
                                        drow[ox + kx - g.pw] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::new(x.shape(), dx)?)
    } else {
        None
    };

    let dw = if need_dw {
        let per_out = g.cin * ksize;
        let mut dw = vec![0.0; g.cout * per_out];
        dw.par_chunks_mut(per_out).enumerate().for_each(|(co, wrow)| {
            for bi in 0..g.n {
                let gv = &gd[(bi * g.cout + co) * vol_out..][..vol_out];
                for ci in 0..g.cin {
                    let xv = &xd[(bi * g.cin + ci) * vol_in..][..vol_in];
                    for kz in 0..g.kd {
                        for ky in 0..g.kh {
                            let (oy_lo, oy_hi) = tap_range(ky, g.ph, g.h, g.oh);
                            for kx in 0..g.kw {
                                let (ox_lo, ox_hi) = tap_range(kx, g.pw, g.w, g.ow);
                                let mut acc = 0.0;
                                for (oz, iz) in g.depth_taps(kz) {
                                    let xp = &xv[iz * plane_in..][..plane_in];
                                    let gp = &gv[oz * plane_out..][..plane_out];
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy + ky - g.ph;
                                        let xrow = &xp[iy * g.w..][..g.w];
                                        let grow = &gp[oy * g.ow..][..g.ow];
                                        for ox in ox_lo..ox_hi {
                                            acc += grow[ox] * xrow[ox + kx - g.pw];
                                        }
                                    }
                                }
                                wrow[ci * ksize + (kz * g.kh + ky) * g.kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::new(w.shape(), dw)?)
    } else {
        None
    };

    let db = channel_sums(gd, g.n, g.cout, vol_out);
    Ok(ConvGrads { dx, dw, db })
}

/// Transposed convolution with kernel `k` and stride `s`, no padding:
/// output extent `(H - 1)·s + k`. Weights are `[C_in, C_out, k, k]`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let (xs, squeeze) = batched4("conv_transpose2d", x)?;
    let [n, cin, h, wd] = xs;
    let (cout, k) = transpose_weight_dims(w, cin)?;
    check_bias("conv_transpose2d", b, cout)?;
    if stride == 0 {
        return Err(Error::precondition("conv_transpose2d", "stride must be positive"));
    }
    let (oh, ow) = ((h - 1) * stride + k, (wd - 1) * stride + k);
    let xd = x.data();
    let wv = w.data();
    let plane_in = h * wd;
    let plane_out = oh * ow;
    let mut out = vec![0.0; n * cout * plane_out];
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (bi, co) = (idx / cout, idx % cout);
            plane.fill(b.map_or(0.0, |b| b.data()[co]));
            for ci in 0..cin {
                let xp = &xd[(bi * cin + ci) * plane_in..][..plane_in];
                let wk = &wv[(ci * cout + co) * k * k..][..k * k];
                for iy in 0..h {
                    for ix in 0..wd {
                        let xval = xp[iy * wd + ix];
                        for ky in 0..k {
                            let orow = &mut plane[(iy * stride + ky) * ow + ix * stride..];
                            for kx in 0..k {
                                orow[kx] += xval * wk[ky * k + kx];
                            }
                        }
                    }
                }
            }
        });
    let t = Tensor::new(&[n, cout, oh, ow], out)?;
    Ok(unbatch(t, squeeze))
}

fn transpose_weight_dims(w: &Tensor, cin: usize) -> Result<(usize, usize)> {
    w.expect_rank("conv_transpose2d weight", 4)?;
    if w.dim(0) != cin {
        return Err(Error::dim("conv_transpose2d", "in_channels", w.dim(0), cin));
    }
    if w.dim(2) != w.dim(3) {
        return Err(Error::precondition("conv_transpose2d", "kernel must be square"));
    }
    Ok((w.dim(1), w.dim(2)))
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads> {
    let (xs, squeeze) = batched4("conv_transpose2d_backward", x)?;
    let [n, cin, h, wd] = xs;
    let (cout, k) = transpose_weight_dims(w, cin)?;
    let (oh, ow) = ((h - 1) * stride + k, (wd - 1) * stride + k);
    let plane_in = h * wd;
    let plane_out = oh * ow;
    if gout.len() != n * cout * plane_out {
        return Err(Error::dim("conv_transpose2d_backward", "grad", n * cout * plane_out, gout.len()));
    }
    let xd = x.data();
    let wv = w.data();
    let gd = gout.data();

    let dx = if need_dx {
        let mut dx = vec![0.0; n * cin * plane_in];
        dx.par_chunks_mut(plane_in).enumerate().for_each(|(idx, plane)| {
            let (bi, ci) = (idx / cin, idx % cin);
            for co in 0..cout {
                let gp = &gd[(bi * cout + co) * plane_out..][..plane_out];
                let wk = &wv[(ci * cout + co) * k * k..][..k * k];
                for iy in 0..h {
                    for ix in 0..wd {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let grow = &gp[(iy * stride + ky) * ow + ix * stride..];
                            for kx in 0..k {
                                acc += grow[kx] * wk[ky * k + kx];
                            }
                        }
                        plane[iy * wd + ix] += acc;
                    }
                }
            }
        });
        let shape = if squeeze {
            vec![cin, h, wd]
        } else {
            vec![n, cin, h, wd]
        };
        Some(Tensor::new(&shape, dx)?)
    } else {
        None
    };

    let dw = if need_dw {
        let mut dw = vec![0.0; cin * cout * k * k];
        dw.par_chunks_mut(k * k).enumerate().for_each(|(idx, wk)| {
            let (ci, co) = (idx / cout, idx % cout);
            for bi in 0..n {
                let xp = &xd[(bi * cin + ci) * plane_in..][..plane_in];
                let gp = &gd[(bi * cout + co) * plane_out..][..plane_out];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for iy in 0..h {
                            for ix in 0..wd {
                                acc += xp[iy * wd + ix] * gp[(iy * stride + ky) * ow + ix * stride + kx];
                            }
                        }
                        wk[ky * k + kx] += acc;
                    }
                }
            }
        });
        Some(Tensor::new(w.shape(), dw)?)
    } else {
        None
    };

    let db = channel_sums(gd, n, cout, plane_out);
    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops, padded taps skipped, same accumulation order.
    fn conv2d_oracle(x: &Tensor, w: &Tensor, b: &[f64], spec: &Conv2dSpec) -> Tensor {
        let [n, cin, h, wd] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
        let (kh, kw) = spec.kernel;
        let (ph, pw) = match spec.padding {
            Padding::Same => (kh / 2, kw / 2),
            Padding::Valid => (0, 0),
        };
        let (oh, ow) = (h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1);
        let cin_g = cin / spec.groups;
        let cout_g = spec.out_channels / spec.groups;
        let mut out = Tensor::zeros(&[n, spec.out_channels, oh, ow]);
        for bi in 0..n {
            for co in 0..spec.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for cig in 0..cin_g {
                            let ci = (co / cout_g) * cin_g + cig;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize + ky as isize - ph as isize;
                                    let ix = ox as isize + kx as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((co * cin_g + cig) * kh + ky) * kw + kx];
                                    acc += wv * xv;
                                }
                            }
                        }
                        out.data_mut()[((bi * spec.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn conv3d_oracle(x: &Tensor, w: &Tensor, b: &[f64], spec: &Conv3dSpec) -> Tensor {
        let [n, cin, d, h, wd] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)];
        let (kd, kh, kw) = spec.kernel;
        let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
        let od = spec.out_depth(d).unwrap();
        let cout = spec.out_channels;
        let mut out = Tensor::zeros(&[n, cout, od, h, wd]);
        for bi in 0..n {
            for co in 0..cout {
                for oz in 0..od {
                    for oy in 0..h {
                        for ox in 0..wd {
                            let mut acc = b[co];
                            for ci in 0..cin {
                                for kz in 0..kd {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iz = (oz * spec.depth_stride + kz) as isize - pd as isize;
                                            let iy = (oy + ky) as isize - ph as isize;
                                            let ix = (ox + kx) as isize - pw as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d || iy >= h || ix >= wd {
                                                continue;
                                            }
                                            let xv = x.data()[(((bi * cin + ci) * d + iz) * h + iy) * wd + ix];
                                            let wv = w.data()[(((co * cin + ci) * kd + kz) * kh + ky) * kw + kx];
                                            acc += wv * xv;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((bi * cout + co) * od + oz) * h + oy) * wd + ox] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = Conv2dSpec::new(1, 2, 3);
        let w = Tensor::randn(&spec.weight_shape(), 1.0, &mut rng);
        let y = conv2d(&Tensor::zeros(&[1, 3, 3]), &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_unit_kernel_scales() {
        let spec = Conv2dSpec::new(1, 1, 1);
        let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), &spec).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (spec, shape) in [
            (Conv2dSpec::new(2, 3, 3), [1, 2, 8, 8]),
            (Conv2dSpec::new(4, 4, 5), [2, 4, 16, 16]),
            (Conv2dSpec::depthwise(4, 3), [1, 4, 16, 16]),
            (Conv2dSpec::new(6, 2, 5).with_groups(2), [1, 6, 7, 9]),
            (Conv2dSpec::new(2, 3, 3).with_padding(Padding::Valid), [2, 2, 6, 5]),
        ] {
            let x = Tensor::randn(&shape, 1.0, &mut rng);
            let w = Tensor::randn(&spec.weight_shape(), 1.0, &mut rng);
            let b = Tensor::randn(&[spec.out_channels], 1.0, &mut rng);
            let fast = conv2d(&x, &w, Some(&b), &spec).unwrap();
            let slow = conv2d_oracle(&x, &w, b.data(), &spec);
            assert_eq!(fast, slow, "{spec:?}");
        }
    }

    #[test]
    fn conv2d_reports_offending_axis() {
        let spec = Conv2dSpec::new(3, 1, 3);
        let w = Tensor::zeros(&spec.weight_shape());
        let err = conv2d(&Tensor::zeros(&[2, 4, 4]), &w, None, &spec).unwrap_err();
        assert!(matches!(err, Error::Dim { axis: "in_channels", expected: 3, got: 2, .. }));
        let even = Conv2dSpec::new(1, 1, 2);
        let w = Tensor::zeros(&even.weight_shape());
        assert!(conv2d(&Tensor::zeros(&[1, 4, 4]), &w, None, &even).is_err());
    }

    #[test]
    fn conv3d_identity_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 1, 4, 4, 4], 1.0, &mut rng);
        let id = Conv3dSpec::new(1, 1, (1, 1, 1));
        let y = conv3d(&x, &Tensor::full(&[1, 1, 1, 1, 1], 1.0), None, &id).unwrap();
        assert_eq!(y, x);
        let zero = conv3d(&Tensor::zeros(&[1, 1, 4, 4, 4]), &Tensor::full(&[1, 1, 1, 1, 1], 3.0), None, &id)
            .unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        for spec in [
            Conv3dSpec::new(1, 2, (3, 3, 3)),
            Conv3dSpec::new(2, 3, (7, 3, 3)).with_depth_stride(2),
        ] {
            let x = Tensor::randn(&[2, spec.in_channels, 9, 5, 6], 1.0, &mut rng);
            let w = Tensor::randn(&spec.weight_shape(), 1.0, &mut rng);
            let b = Tensor::randn(&[spec.out_channels], 1.0, &mut rng);
            let fast = conv3d(&x, &w, Some(&b), &spec).unwrap();
            assert_eq!(fast, conv3d_oracle(&x, &w, b.data(), &spec));
        }
    }

    #[test]
    fn depth_stride_two_halves_depth_rounding_up() {
        let spec = Conv3dSpec::new(1, 1, (7, 3, 3)).with_depth_stride(2);
        assert_eq!(spec.out_depth(30).unwrap(), 15);
        assert_eq!(spec.out_depth(31).unwrap(), 16);
        assert_eq!(spec.out_depth(4).unwrap(), 2);
    }

    #[test]
    fn transposed_conv_doubles_extent_with_disjoint_taps() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1, 2, 2], vec![1.0, 10.0, 100.0, 1000.0]).unwrap();
        let y = conv_transpose2d(&x, &w, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.data(),
            &[
                1.0, 10.0, 2.0, 20.0, //
                100.0, 1000.0, 200.0, 2000.0, //
                3.0, 30.0, 4.0, 40.0, //
                300.0, 3000.0, 400.0, 4000.0
            ]
        );
    }
}
