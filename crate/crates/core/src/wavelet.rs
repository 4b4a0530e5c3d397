//! Orthonormal 2D discrete wavelet transform with periodized boundaries.
//!
//! One level splits each channel into four half-resolution sub-bands. With
//! periodization the analysis operator is an orthogonal matrix, so the inverse
//! is its transpose: exact reconstruction at every even size, energy
//! preservation, and `idwt2` doubles as the adjoint of `dwt2` during
//! backpropagation.
//!
//! Sub-band naming: the first letter is the filter applied along the width,
//! the second along the height. `LH` therefore responds to horizontal edges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    #[default]
    Haar,
    Db2,
}

const HAAR: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];

// (1 ± √3)/(4√2), (3 ± √3)/(4√2)
const DB2: [f64; 4] = [
    0.482962913144534,
    0.836516303737808,
    0.224143868042013,
    -0.129409522551260,
];

impl WaveletFamily {
    pub fn name(self) -> &'static str {
        match self {
            WaveletFamily::Haar => "haar",
            WaveletFamily::Db2 => "db2",
        }
    }

    /// Analysis low-pass taps.
    pub fn lowpass(self) -> &'static [f64] {
        match self {
            WaveletFamily::Haar => &HAAR,
            WaveletFamily::Db2 => &DB2,
        }
    }

    /// Analysis high-pass taps: the quadrature mirror `g[k] = (-1)^k h[L-1-k]`.
    pub fn highpass(self) -> Vec<f64> {
        let h = self.lowpass();
        let n = h.len();
        (0..n)
            .map(|k| if k % 2 == 0 { h[n - 1 - k] } else { -h[n - 1 - k] })
            .collect()
    }

    /// Synthesis filters are the time-reversed analysis filters.
    pub fn synthesis(self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = self.lowpass().to_vec();
        let mut hi = self.highpass();
        lo.reverse();
        hi.reverse();
        (lo, hi)
    }
}

impl std::str::FromStr for WaveletFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "haar" => Ok(WaveletFamily::Haar),
            "db2" => Ok(WaveletFamily::Db2),
            other => Err(format!("unknown wavelet family `{other}` (expected haar or db2)")),
        }
    }
}

/// The four sub-bands of one decomposition level. Each has the parent's
/// leading axes and half its spatial extents.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl SubbandSet {
    pub fn zeros_like(&self) -> Self {
        let z = Tensor::zeros(self.ll.shape());
        SubbandSet {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        }
    }

    pub fn add(&self, other: &SubbandSet) -> Result<SubbandSet> {
        Ok(SubbandSet {
            ll: self.ll.add(&other.ll)?,
            lh: self.lh.add(&other.lh)?,
            hl: self.hl.add(&other.hl)?,
            hh: self.hh.add(&other.hh)?,
        })
    }

    pub fn scale(&self, s: f64) -> SubbandSet {
        SubbandSet {
            ll: self.ll.scale(s),
            lh: self.lh.scale(s),
            hl: self.hl.scale(s),
            hh: self.hh.scale(s),
        }
    }

    pub fn energy(&self) -> f64 {
        self.ll.sq_norm() + self.lh.sq_norm() + self.hl.sq_norm() + self.hh.sq_norm()
    }
}

/// Multi-level decomposition. `levels[i]` holds level `i + 1`; each level's
/// `ll` feeds the next, and the last level's `ll` is the coarsest approximation.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    pub family: WaveletFamily,
    pub levels: Vec<SubbandSet>,
}

impl WaveletPyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn coarsest(&self) -> &Tensor {
        &self.levels.last().expect("pyramid has at least one level").ll
    }

    /// Inverse of [`wt_multilevel`].
    pub fn reconstruct(&self) -> Result<Tensor> {
        let mut iter = self.levels.iter().rev();
        let last = iter.next().expect("pyramid has at least one level");
        let mut cur = idwt2(last, self.family)?;
        for level in iter {
            let set = SubbandSet {
                ll: cur,
                lh: level.lh.clone(),
                hl: level.hl.clone(),
                hh: level.hh.clone(),
            };
            cur = idwt2(&set, self.family)?;
        }
        Ok(cur)
    }
}

fn spatial(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::dim(op, "rank", 3, x.rank()));
    }
    let r = x.rank();
    let (h, w) = (x.dim(r - 2), x.dim(r - 1));
    Ok((x.len() / (h * w), h, w))
}

#[inline]
fn analyze_line(src: &[f64], stride: usize, n: usize, h: &[f64], g: &[f64], lo: &mut [f64], hi: &mut [f64], ostride: usize) {
    for k in 0..n / 2 {
        let mut a = 0.0;
        let mut d = 0.0;
        for (j, (&hj, &gj)) in h.iter().zip(g).enumerate() {
            let v = src[((2 * k + j) % n) * stride];
            a += hj * v;
            d += gj * v;
        }
        lo[k * ostride] = a;
        hi[k * ostride] = d;
    }
}

#[inline]
fn synthesize_line(lo: &[f64], hi: &[f64], istride: usize, n: usize, h: &[f64], g: &[f64], dst: &mut [f64], stride: usize) {
    for i in 0..n {
        dst[i * stride] = 0.0;
    }
    for k in 0..n / 2 {
        let (a, d) = (lo[k * istride], hi[k * istride]);
        for (j, (&hj, &gj)) in h.iter().zip(g).enumerate() {
            dst[((2 * k + j) % n) * stride] += hj * a + gj * d;
        }
    }
}

/// One analysis level over the last two axes of `[.., H, W]`.
pub fn dwt2(x: &Tensor, family: WaveletFamily) -> Result<SubbandSet> {
    let (planes, h, w) = spatial("dwt2", x)?;
    if h % 2 != 0 {
        return Err(Error::precondition("dwt2", format!("height {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::precondition("dwt2", format!("width {w} is odd")));
    }
    let (hh2, hw2) = (h / 2, w / 2);
    let lo_f = family.lowpass();
    let hi_f = family.highpass();
    let mut out: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; planes * hh2 * hw2]);
    let mut lw = vec![0.0; h * hw2];
    let mut hw = vec![0.0; h * hw2];
    let xd = x.data();
    for p in 0..planes {
        let src = &xd[p * h * w..][..h * w];
        for y in 0..h {
            analyze_line(&src[y * w..], 1, w, lo_f, &hi_f, &mut lw[y * hw2..], &mut hw[y * hw2..], 1);
        }
        let [ll, lh, hl, hhb] = &mut out;
        let base = p * hh2 * hw2;
        for xcol in 0..hw2 {
            analyze_line(&lw[xcol..], hw2, h, lo_f, &hi_f, &mut ll[base + xcol..], &mut lh[base + xcol..], hw2);
            analyze_line(&hw[xcol..], hw2, h, lo_f, &hi_f, &mut hl[base + xcol..], &mut hhb[base + xcol..], hw2);
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = hh2;
    shape[r - 1] = hw2;
    let [ll, lh, hl, hh] = out;
    Ok(SubbandSet {
        ll: Tensor::new(&shape, ll)?,
        lh: Tensor::new(&shape, lh)?,
        hl: Tensor::new(&shape, hl)?,
        hh: Tensor::new(&shape, hh)?,
    })
}

/// Exact inverse (and adjoint) of [`dwt2`].
pub fn idwt2(s: &SubbandSet, family: WaveletFamily) -> Result<Tensor> {
    for t in [&s.lh, &s.hl, &s.hh] {
        s.ll.expect_same_shape("idwt2", t)?;
    }
    let (planes, hh2, hw2) = spatial("idwt2", &s.ll)?;
    let (h, w) = (2 * hh2, 2 * hw2);
    let lo_f = family.lowpass();
    let hi_f = family.highpass();
    let mut out = vec![0.0; planes * h * w];
    let mut lw = vec![0.0; h * hw2];
    let mut hw = vec![0.0; h * hw2];
    for p in 0..planes {
        let base = p * hh2 * hw2;
        for xcol in 0..hw2 {
            synthesize_line(&s.ll.data()[base + xcol..], &s.lh.data()[base + xcol..], hw2, h, lo_f, &hi_f, &mut lw[xcol..], hw2);
            synthesize_line(&s.hl.data()[base + xcol..], &s.hh.data()[base + xcol..], hw2, h, lo_f, &hi_f, &mut hw[xcol..], hw2);
        }
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            synthesize_line(&lw[y * hw2..], &hw[y * hw2..], 1, w, lo_f, &hi_f, &mut dst[y * w..], 1);
        }
    }
    let mut shape = s.ll.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::new(&shape, out)
}

/// Recursive decomposition: level `i` transforms level `i - 1`'s `ll`.
pub fn wt_multilevel(x: &Tensor, levels: usize, family: WaveletFamily) -> Result<WaveletPyramid> {
    if levels == 0 {
        return Err(Error::precondition("wt_multilevel", "need at least one level"));
    }
    let (_, h, w) = spatial("wt_multilevel", x)?;
    let unit = 1usize << levels;
    if h % unit != 0 || w % unit != 0 {
        return Err(Error::precondition(
            "wt_multilevel",
            format!("{h}x{w} is not divisible by 2^{levels}"),
        ));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = dwt2(x, family)?;
    for _ in 1..levels {
        let next = dwt2(&cur.ll, family)?;
        out.push(cur);
        cur = next;
    }
    out.push(cur);
    Ok(WaveletPyramid { family, levels: out })
}

/// Packs a level as `[N, 4C, h, w]`: channels `0..C` are `LL`, then channel
/// `C + 3c + j` holds band `j ∈ {LH, HL, HH}` of input channel `c`.
pub fn dwt2_packed(x: &Tensor, family: WaveletFamily) -> Result<Tensor> {
    x.expect_rank("dwt2_packed", 4)?;
    let (n, c) = (x.dim(0), x.dim(1));
    let s = dwt2(x, family)?;
    let (h2, w2) = (s.ll.dim(2), s.ll.dim(3));
    let plane = h2 * w2;
    let mut out = vec![0.0; n * 4 * c * plane];
    for bi in 0..n {
        for ci in 0..c {
            let src = (bi * c + ci) * plane;
            let put = |ch: usize, t: &Tensor, out: &mut [f64]| {
                out[(bi * 4 * c + ch) * plane..][..plane].copy_from_slice(&t.data()[src..][..plane]);
            };
            put(ci, &s.ll, &mut out);
            put(c + 3 * ci, &s.lh, &mut out);
            put(c + 3 * ci + 1, &s.hl, &mut out);
            put(c + 3 * ci + 2, &s.hh, &mut out);
        }
    }
    Tensor::new(&[n, 4 * c, h2, w2], out)
}

/// Inverse of [`dwt2_packed`] from separate `LL: [N,C,h,w]` and `H: [N,3C,h,w]`.
pub fn idwt2_packed(ll: &Tensor, high: &Tensor, family: WaveletFamily) -> Result<Tensor> {
    ll.expect_rank("idwt2_packed", 4)?;
    high.expect_rank("idwt2_packed", 4)?;
    let [n, c, h2, w2] = [ll.dim(0), ll.dim(1), ll.dim(2), ll.dim(3)];
    if high.shape() != [n, 3 * c, h2, w2] {
        return Err(Error::Shape {
            op: "idwt2_packed",
            lhs: vec![n, 3 * c, h2, w2],
            rhs: high.shape().to_vec(),
        });
    }
    let plane = h2 * w2;
    let unpack = |j: usize| {
        Tensor::from_fn(ll.shape(), |i| {
            let (bc, p) = (i / plane, i % plane);
            let (bi, ci) = (bc / c, bc % c);
            high.data()[(bi * 3 * c + 3 * ci + j) * plane + p]
        })
    };
    let set = SubbandSet {
        ll: ll.clone(),
        lh: unpack(0),
        hl: unpack(1),
        hh: unpack(2),
    };
    idwt2(&set, family)
}
