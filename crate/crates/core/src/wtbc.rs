//! Wavelet-domain binary convolution.
//!
//! Each level decomposes the previous level's `LL` band, convolves `LL` and the
//! stacked high-frequency bands with depthwise binary kernels (so a level
//! emits `4·C` channels), gates each result with a sigmoid attention map, and
//! the levels are folded back depth-first with the inverse transform:
//!
//! ```text
//! Z(L+1) = 0
//! Z(i)   = IWT(Fused_LL(i) + Z(i+1), Fused_H(i))
//! ```
//!
//! A 1×1 projection maps `Z(1)` to the declared output width.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::conv::{conv2d, Conv2dSpec};
use crate::params::{he_normal, Forward, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::wavelet::WaveletFamily;

/// Splits `W` (output channels on axis 0) into signs and per-channel scales.
/// `sign(0) = +1`; `α_c` is the mean absolute value of channel `c`, which is
/// the least-squares scale for a fixed sign pattern.
pub fn binarize(w: &Tensor) -> (Tensor, Vec<f64>) {
    let outs = w.dim(0);
    let per = w.len() / outs;
    let signs = w.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
    let alpha = w
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>() / per as f64)
        .collect();
    (signs, alpha)
}

/// `α·sign(W)` with the per-channel scales of [`binarize`].
pub fn effective_weights(w: &Tensor) -> Tensor {
    let (signs, alpha) = binarize(w);
    let per = w.len() / alpha.len();
    Tensor::from_fn(w.shape(), |i| alpha[i / per] * signs.data()[i])
}

/// Convolution with binarized weights.
pub fn binary_conv2d(x: &Tensor, w: &Tensor, spec: &Conv2dSpec) -> Result<Tensor> {
    conv2d(x, &effective_weights(w), None, spec)
}

/// Kernel sizes for the `LL` path and the high-frequency path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelSet {
    pub ll: usize,
    pub high: usize,
}

impl KernelSet {
    pub const K3: KernelSet = KernelSet { ll: 3, high: 3 };
    pub const K5: KernelSet = KernelSet { ll: 5, high: 5 };
    pub const MIXED: KernelSet = KernelSet { ll: 5, high: 3 };

    pub fn uniform(k: usize) -> Self {
        KernelSet { ll: k, high: k }
    }
}

impl Default for KernelSet {
    fn default() -> Self {
        KernelSet::MIXED
    }
}

impl fmt::Display for KernelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ll == self.high {
            write!(f, "{0}x{0}", self.ll)
        } else {
            let (a, b) = (self.ll.min(self.high), self.ll.max(self.high));
            write!(f, "{a}x{a}+{b}x{b}")
        }
    }
}

impl FromStr for KernelSet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parse_one = |p: &str| -> std::result::Result<usize, String> {
            let (a, b) = p
                .trim()
                .split_once(['x', '×'])
                .ok_or_else(|| format!("bad kernel `{p}`"))?;
            let (a, b): (usize, usize) = (
                a.parse().map_err(|_| format!("bad kernel `{p}`"))?,
                b.parse().map_err(|_| format!("bad kernel `{p}`"))?,
            );
            if a != b || a == 0 {
                return Err(format!("kernel `{p}` must be square"));
            }
            Ok(a)
        };
        match s.split_once('+') {
            // The larger kernel serves the low-frequency band.
            Some((a, b)) => {
                let (a, b) = (parse_one(a)?, parse_one(b)?);
                Ok(KernelSet {
                    ll: a.max(b),
                    high: a.min(b),
                })
            }
            None => Ok(KernelSet::uniform(parse_one(s)?)),
        }
    }
}

impl Serialize for KernelSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KernelSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Which band drives each attention map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionWiring {
    /// `Attn_LL` from `X_LL`, `Attn_H` from `X_H`.
    #[default]
    SameBand,
    /// `Attn_LL` from the channel's three high-frequency bands, `Attn_H` from `X_H`.
    CrossBand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WtbcConfig {
    pub levels: usize,
    pub family: WaveletFamily,
    pub kernels: KernelSet,
    pub wiring: AttentionWiring,
}

impl Default for WtbcConfig {
    fn default() -> Self {
        WtbcConfig {
            levels: 2,
            family: WaveletFamily::Haar,
            kernels: KernelSet::MIXED,
            wiring: AttentionWiring::SameBand,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WtbcLevel {
    pub bc_ll: ParamId,
    pub bc_high: ParamId,
    pub attn_ll_w: ParamId,
    pub attn_ll_b: ParamId,
    pub attn_high_w: ParamId,
    pub attn_high_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Wtbc {
    pub cfg: WtbcConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    pub levels: Vec<WtbcLevel>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// Parameter tally of one instantiated module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WtbcParamBreakdown {
    pub binary: usize,
    pub attention: usize,
    pub projection: usize,
}

impl WtbcParamBreakdown {
    pub fn total(&self) -> usize {
        self.binary + self.attention + self.projection
    }
}

impl Wtbc {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: WtbcConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.levels == 0 {
            return Err(Error::precondition("wtbc", "need at least one decomposition level"));
        }
        let c = in_channels;
        let (kl, kh) = (cfg.kernels.ll, cfg.kernels.high);
        let mut levels = Vec::with_capacity(cfg.levels);
        for i in 1..=cfg.levels {
            let p = format!("{prefix}.level{i}");
            let attn_ll_in = match cfg.wiring {
                AttentionWiring::SameBand => 1,
                AttentionWiring::CrossBand => 3,
            };
            levels.push(WtbcLevel {
                bc_ll: store.add(
                    format!("{p}.bc_ll"),
                    ParamKind::BinaryWeight,
                    he_normal(&[c, 1, kl, kl], kl * kl, rng),
                ),
                bc_high: store.add(
                    format!("{p}.bc_high"),
                    ParamKind::BinaryWeight,
                    he_normal(&[3 * c, 1, kh, kh], kh * kh, rng),
                ),
                attn_ll_w: store.add(
                    format!("{p}.attn_ll.weight"),
                    ParamKind::Weight,
                    he_normal(&[c, attn_ll_in, kl, kl], attn_ll_in * kl * kl, rng),
                ),
                attn_ll_b: store.add(format!("{p}.attn_ll.bias"), ParamKind::Bias, Tensor::zeros(&[c])),
                attn_high_w: store.add(
                    format!("{p}.attn_high.weight"),
                    ParamKind::Weight,
                    he_normal(&[3 * c, 1, kh, kh], kh * kh, rng),
                ),
                attn_high_b: store.add(
                    format!("{p}.attn_high.bias"),
                    ParamKind::Bias,
                    Tensor::zeros(&[3 * c]),
                ),
            });
        }
        let proj_w = store.add(
            format!("{prefix}.proj.weight"),
            ParamKind::Weight,
            he_normal(&[out_channels, c, 1, 1], c, rng),
        );
        let proj_b = store.add(format!("{prefix}.proj.bias"), ParamKind::Bias, Tensor::zeros(&[out_channels]));
        Ok(Wtbc {
            cfg,
            in_channels,
            out_channels,
            levels,
            proj_w,
            proj_b,
        })
    }

    pub fn bc_ll_spec(&self) -> Conv2dSpec {
        Conv2dSpec::depthwise(self.in_channels, self.cfg.kernels.ll)
    }

    pub fn bc_high_spec(&self) -> Conv2dSpec {
        Conv2dSpec::depthwise(3 * self.in_channels, self.cfg.kernels.high)
    }

    pub fn attn_ll_spec(&self) -> Conv2dSpec {
        let c = self.in_channels;
        match self.cfg.wiring {
            AttentionWiring::SameBand => Conv2dSpec::depthwise(c, self.cfg.kernels.ll),
            AttentionWiring::CrossBand => Conv2dSpec::new(3 * c, c, self.cfg.kernels.ll).with_groups(c),
        }
    }

    pub fn attn_high_spec(&self) -> Conv2dSpec {
        Conv2dSpec::depthwise(3 * self.in_channels, self.cfg.kernels.high)
    }

    pub fn proj_spec(&self) -> Conv2dSpec {
        Conv2dSpec::new(self.in_channels, self.out_channels, 1)
    }

    pub fn param_breakdown(&self, store: &ParamStore) -> WtbcParamBreakdown {
        let n = |id: ParamId| store.get(id).len();
        let mut b = WtbcParamBreakdown {
            binary: 0,
            attention: 0,
            projection: n(self.proj_w) + n(self.proj_b),
        };
        for l in &self.levels {
            b.binary += n(l.bc_ll) + n(l.bc_high);
            b.attention += n(l.attn_ll_w) + n(l.attn_ll_b) + n(l.attn_high_w) + n(l.attn_high_b);
        }
        b
    }

    /// Sigmoid gates for one level's `(LL, H)` bands.
    pub fn frequency_attention(&self, fw: &mut Forward, level: usize, ll: Var, high: Var) -> Result<(Var, Var)> {
        let l = &self.levels[level];
        let (wl, bl, wh, bh) = (
            fw.param(l.attn_ll_w),
            fw.param(l.attn_ll_b),
            fw.param(l.attn_high_w),
            fw.param(l.attn_high_b),
        );
        let src = match self.cfg.wiring {
            AttentionWiring::SameBand => ll,
            AttentionWiring::CrossBand => high,
        };
        let a = fw.graph.conv2d(src, wl, Some(bl), self.attn_ll_spec())?;
        let a_ll = fw.graph.sigmoid(a);
        let a = fw.graph.conv2d(high, wh, Some(bh), self.attn_high_spec())?;
        let a_high = fw.graph.sigmoid(a);
        Ok((a_ll, a_high))
    }

    /// Binary convolution of one level's bands: `4·C` output channels split
    /// as `(C, 3C)`.
    pub fn binary_conv(&self, fw: &mut Forward, level: usize, ll: Var, high: Var) -> Result<(Var, Var)> {
        let l = &self.levels[level];
        let (wl, wh) = (fw.param(l.bc_ll), fw.param(l.bc_high));
        let bl = fw.graph.binarize(wl);
        let bh = fw.graph.binarize(wh);
        let y_ll = fw.graph.conv2d(ll, bl, None, self.bc_ll_spec())?;
        let y_high = fw.graph.conv2d(high, bh, None, self.bc_high_spec())?;
        Ok((y_ll, y_high))
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let shape = fw.graph.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("wtbc", "rank", 4, shape.len()));
        }
        let c = self.in_channels;
        if shape[1] != c {
            return Err(Error::dim("wtbc", "channels", c, shape[1]));
        }
        let unit = 1 << self.cfg.levels;
        if shape[2] % unit != 0 || shape[3] % unit != 0 {
            return Err(Error::precondition(
                "wtbc",
                format!(
                    "{}x{} is not divisible by 2^{}",
                    shape[2], shape[3], self.cfg.levels
                ),
            ));
        }

        let mut fused = Vec::with_capacity(self.cfg.levels);
        let mut cur = x;
        for level in 0..self.cfg.levels {
            let packed = fw.graph.dwt2(cur, self.cfg.family)?;
            let ll = fw.graph.slice_channels(packed, 0, c)?;
            let high = fw.graph.slice_channels(packed, c, 3 * c)?;
            let (y_ll, y_high) = self.binary_conv(fw, level, ll, high)?;
            let (a_ll, a_high) = self.frequency_attention(fw, level, ll, high)?;
            let f_ll = fw.graph.mul(a_ll, y_ll)?;
            let f_high = fw.graph.mul(a_high, y_high)?;
            fused.push((f_ll, f_high));
            cur = ll;
        }

        let mut z: Option<Var> = None;
        for &(f_ll, f_high) in fused.iter().rev() {
            let low = match z {
                Some(z) => fw.graph.add(f_ll, z)?,
                None => f_ll,
            };
            z = Some(fw.graph.idwt2(low, f_high, self.cfg.family)?);
        }
        let z = z.expect("at least one level");
        let (pw, pb) = (fw.param(self.proj_w), fw.param(self.proj_b));
        fw.graph.conv2d(z, pw, Some(pb), self.proj_spec())
    }
}

/// Parameter-count comparison between a depthwise `R×R` convolution and an
/// `L`-level module with per-level kernel `k = R / 2^L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCountReport {
    pub receptive_field: usize,
    pub levels: usize,
    pub kernel: usize,
    pub in_channels: usize,
    /// `R² · C_in`
    pub p_std: u64,
    /// `L · 4 · k² · C_in`
    pub p_wtbc: u64,
    /// `P_WTBC / P_std` in lowest terms.
    pub ratio: (u64, u64),
    /// Binary-kernel scalars of an instantiated module with uniform kernel `k`.
    pub measured: WtbcParamBreakdown,
}

impl ParamCountReport {
    pub fn ratio_f64(&self) -> f64 {
        self.ratio.0 as f64 / self.ratio.1 as f64
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn wtbc_param_count(receptive_field: usize, levels: usize, in_channels: usize) -> Result<ParamCountReport> {
    if levels == 0 || levels > 30 {
        return Err(Error::precondition("wtbc_param_count", "levels must be in 1..=30"));
    }
    let unit = 1usize << levels;
    if receptive_field == 0 || receptive_field % unit != 0 {
        return Err(Error::precondition(
            "wtbc_param_count",
            format!("R = {receptive_field} is not divisible by 2^{levels}"),
        ));
    }
    let k = receptive_field / unit;
    let (r, l, c, k64) = (receptive_field as u64, levels as u64, in_channels as u64, k as u64);
    let p_std = r * r * c;
    let p_wtbc = l * 4 * k64 * k64 * c;
    let g = gcd(p_wtbc, p_std).max(1);
    let ratio = (p_wtbc / g, p_std / g);

    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let cfg = WtbcConfig {
        levels,
        kernels: KernelSet::uniform(k),
        ..WtbcConfig::default()
    };
    let module = Wtbc::new(&mut store, "probe", in_channels, in_channels, cfg, &mut rng)?;
    Ok(ParamCountReport {
        receptive_field,
        levels,
        kernel: k,
        in_channels,
        p_std,
        p_wtbc,
        ratio,
        measured: module.param_breakdown(&store),
    })
}
