//! Multi-channel attention: a spectral 3-D convolution block followed by
//! dual-pool channel attention and dual-pool spatial attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::conv::{Conv2dSpec, Conv3dSpec};
use crate::ops::pool::PoolMode;
use crate::params::{he_normal, Forward, ParamId, ParamKind, ParamStore, StatsId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McaConfig {
    /// Output feature maps of the 3-D convolution.
    pub features: usize,
    /// Kernel extent along the spectral pseudo-depth.
    pub depth_kernel: usize,
    /// Spatial kernel extent of the 3-D convolution.
    pub spatial_kernel: usize,
    pub depth_stride: usize,
    /// Channel reduction ratio of the shared MLP.
    pub ratio: usize,
    pub attention_kernel: usize,
}

impl Default for McaConfig {
    fn default() -> Self {
        McaConfig {
            features: 8,
            depth_kernel: 7,
            spatial_kernel: 3,
            depth_stride: 2,
            ratio: 8,
            attention_kernel: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Mca {
    pub cfg: McaConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv_w: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_stats: StatsId,
    pub channel: Option<ChannelAttention>,
    pub spatial: Option<SpatialAttention>,
}

impl Mca {
    pub fn conv_spec(cfg: &McaConfig) -> Conv3dSpec {
        Conv3dSpec::new(1, cfg.features, (cfg.depth_kernel, cfg.spatial_kernel, cfg.spatial_kernel))
            .with_depth_stride(cfg.depth_stride)
    }

    pub fn attention(&self) -> bool {
        self.channel.is_some()
    }

    /// Channel count after folding the pseudo-depth into channels.
    pub fn output_channels(in_channels: usize, cfg: &McaConfig) -> Result<usize> {
        Ok(cfg.features * Self::conv_spec(cfg).out_depth(in_channels)?)
    }

    /// With `attention` false only the 3-D convolution block is built.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        cfg: McaConfig,
        attention: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.features == 0 || cfg.ratio == 0 || cfg.depth_stride == 0 {
            return Err(Error::precondition("mca", "features, ratio and depth stride must be positive"));
        }
        let out_channels = Self::output_channels(in_channels, &cfg)?;
        let spec = Self::conv_spec(&cfg);
        let fan = spec.weight_shape()[1..].iter().product();
        let conv_w = store.add(
            format!("{prefix}.conv3d.weight"),
            ParamKind::Weight,
            he_normal(&spec.weight_shape(), fan, rng),
        );
        let bn_gamma = store.add(format!("{prefix}.bn.gamma"), ParamKind::BnScale, Tensor::full(&[cfg.features], 1.0));
        let bn_beta = store.add(format!("{prefix}.bn.beta"), ParamKind::BnShift, Tensor::zeros(&[cfg.features]));
        let bn_stats = store.add_stats(format!("{prefix}.bn"), cfg.features);

        let (channel, spatial) = if attention {
            let c = out_channels;
            let hidden = (c / cfg.ratio).max(1);
            let channel = ChannelAttention {
                w1: store.add(format!("{prefix}.ca.fc1.weight"), ParamKind::Weight, he_normal(&[hidden, c], c, rng)),
                b1: store.add(format!("{prefix}.ca.fc1.bias"), ParamKind::Bias, Tensor::zeros(&[hidden])),
                w2: store.add(format!("{prefix}.ca.fc2.weight"), ParamKind::Weight, he_normal(&[c, hidden], hidden, rng)),
                b2: store.add(format!("{prefix}.ca.fc2.bias"), ParamKind::Bias, Tensor::zeros(&[c])),
            };
            let k = cfg.attention_kernel;
            let spatial = SpatialAttention {
                w: store.add(format!("{prefix}.sa.weight"), ParamKind::Weight, he_normal(&[1, 1, k, k], k * k, rng)),
                b: store.add(format!("{prefix}.sa.bias"), ParamKind::Bias, Tensor::zeros(&[1])),
            };
            (Some(channel), Some(spatial))
        } else {
            (None, None)
        };
        Ok(Mca {
            cfg,
            in_channels,
            out_channels,
            conv_w,
            bn_gamma,
            bn_beta,
            bn_stats,
            channel,
            spatial,
        })
    }

    /// `ReLU(BN(conv3d(x)))` with the pseudo-depth folded into channels:
    /// `[N, C, H, W] -> [N, features·D', H, W]`.
    pub fn base(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let shape = fw.graph.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("mca", "rank", 4, shape.len()));
        }
        if shape[1] != self.in_channels {
            return Err(Error::dim("mca", "channels", self.in_channels, shape[1]));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let x5 = fw.graph.reshape(x, &[n, 1, self.in_channels, h, w])?;
        let cw = fw.param(self.conv_w);
        let y = fw.graph.conv3d(x5, cw, None, Self::conv_spec(&self.cfg))?;
        let (g, b) = (fw.param(self.bn_gamma), fw.param(self.bn_beta));
        let running = fw.running_stats(self.bn_stats).clone();
        let training = fw.training();
        let (y, updated) = fw.graph.batch_norm(y, g, b, &running, training)?;
        if let Some(stats) = updated {
            fw.record_stats(self.bn_stats, stats);
        }
        let y = fw.graph.relu(y);
        fw.graph.reshape(y, &[n, self.out_channels, h, w])
    }

    /// `σ(MLP(AvgPool f)) + σ(MLP(MaxPool f))`, shape `[N, C]`.
    pub fn channel_gate(&self, fw: &mut Forward, f: Var) -> Result<Var> {
        let ca = self
            .channel
            .as_ref()
            .ok_or_else(|| Error::precondition("mca", "attention is disabled"))?;
        let (w1, b1, w2, b2) = (fw.param(ca.w1), fw.param(ca.b1), fw.param(ca.w2), fw.param(ca.b2));
        let branch = |fw: &mut Forward, mode: PoolMode| -> Result<Var> {
            let p = fw.graph.global_pool(f, mode)?;
            let h = fw.graph.linear(p, w1, Some(b1))?;
            let h = fw.graph.relu(h);
            let a = fw.graph.linear(h, w2, Some(b2))?;
            Ok(fw.graph.sigmoid(a))
        };
        let a = branch(fw, PoolMode::Avg)?;
        let b = branch(fw, PoolMode::Max)?;
        fw.graph.add(a, b)
    }

    pub fn channel_attention(&self, fw: &mut Forward, f: Var) -> Result<Var> {
        let g = self.channel_gate(fw, f)?;
        fw.graph.scale_channels(f, g)
    }

    /// `σ(conv(mean_c f + max_c f))`, shape `[N, 1, H, W]`.
    pub fn spatial_gate(&self, fw: &mut Forward, f: Var) -> Result<Var> {
        let sa = self
            .spatial
            .as_ref()
            .ok_or_else(|| Error::precondition("mca", "attention is disabled"))?;
        let avg = fw.graph.channel_pool(f, PoolMode::Avg)?;
        let max = fw.graph.channel_pool(f, PoolMode::Max)?;
        let s = fw.graph.add(avg, max)?;
        let (w, b) = (fw.param(sa.w), fw.param(sa.b));
        let c = fw.graph.conv2d(s, w, Some(b), Conv2dSpec::new(1, 1, self.cfg.attention_kernel))?;
        Ok(fw.graph.sigmoid(c))
    }

    pub fn spatial_attention(&self, fw: &mut Forward, f: Var) -> Result<Var> {
        let g = self.spatial_gate(fw, f)?;
        fw.graph.scale_spatial(f, g)
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let f = self.base(fw, x)?;
        if !self.attention() {
            return Ok(f);
        }
        let mid = self.channel_attention(fw, f)?;
        self.spatial_attention(fw, mid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::activation::sigmoid_scalar;
    use crate::params::param_grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(c: usize, seed: u64) -> (ParamStore, Mca) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mca::new(&mut store, "mca", c, McaConfig::default(), true, &mut rng).unwrap();
        (store, m)
    }

    fn zero_attention(store: &mut ParamStore, m: &Mca) {
        let ca = m.channel.as_ref().unwrap();
        let sa = m.spatial.as_ref().unwrap();
        for id in [ca.w1, ca.b1, ca.w2, ca.b2, sa.w, sa.b] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
    }

    #[test]
    fn base_zero_and_nonnegative() {
        let (store, m) = build(6, 1);
        for training in [false, true] {
            let mut fw = Forward::new(&store, training, false);
            let x = fw.input(Tensor::zeros(&[2, 6, 8, 8]));
            let y = m.base(&mut fw, x).unwrap();
            assert_eq!(fw.graph.value(y).shape(), &[2, 24, 8, 8]);
            assert_eq!(fw.graph.value(y).sq_norm(), 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut fw = Forward::new(&store, true, false);
        let x = fw.input(Tensor::randn(&[2, 6, 8, 8], 1.0, &mut rng));
        let y = m.forward(&mut fw, x).unwrap();
        assert_eq!(fw.graph.value(y).shape(), &[2, 24, 8, 8]);
        assert!(fw.graph.value(y).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn output_width_for_thirty_bands() {
        assert_eq!(Mca::output_channels(30, &McaConfig::default()).unwrap(), 120);
        assert_eq!(Mca::output_channels(32, &McaConfig::default()).unwrap(), 128);
    }

    #[test]
    fn neutral_gates() {
        let (mut store, m) = build(4, 3);
        zero_attention(&mut store, &m);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fw = Forward::new(&store, true, false);
        let x = fw.input(Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng));
        let f = m.base(&mut fw, x).unwrap();
        let g = m.channel_gate(&mut fw, f).unwrap();
        assert!(fw.graph.value(g).data().iter().all(|&v| v == 1.0));
        let mid = m.channel_attention(&mut fw, f).unwrap();
        assert_eq!(fw.graph.value(mid), fw.graph.value(f));
        let out = m.spatial_attention(&mut fw, mid).unwrap();
        let want = fw.graph.value(f).scale(0.5);
        assert_eq!(fw.graph.value(out), &want);

        let c = fw.input(Tensor::full(&[1, 3, 8, 8], 0.7));
        let out = m.spatial_attention(&mut fw, c).unwrap();
        assert!(fw.graph.value(out).data().iter().all(|&v| v == 0.35));
    }

    #[test]
    fn gates_are_bounded_and_broadcast() {
        let (store, m) = build(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let mut fw = Forward::new(&store, true, false);
            let x = fw.input(Tensor::randn(&[2, 6, 8, 8], 3.0, &mut rng));
            let f = m.base(&mut fw, x).unwrap();
            let g = m.channel_gate(&mut fw, f).unwrap();
            assert_eq!(fw.graph.value(g).shape(), &[2, 24]);
            assert!(fw.graph.value(g).data().iter().all(|&v| v > 0.0 && v < 2.0));
            let mid = m.channel_attention(&mut fw, f).unwrap();
            let s = m.spatial_gate(&mut fw, mid).unwrap();
            assert_eq!(fw.graph.value(s).shape(), &[2, 1, 8, 8]);
            assert!(fw.graph.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
            let out = m.spatial_attention(&mut fw, mid).unwrap();
            assert!(fw.graph.value(out).max_abs() <= fw.graph.value(mid).max_abs());
        }
    }

    /// Single-expression evaluation of `σ(C) ⊗ (σ(A) + σ(B)) ⊗ F`.
    #[test]
    fn composition_matches_closed_form() {
        let (store, m) = build(4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut fw = Forward::new(&store, true, false);
        let x = fw.input(Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng));
        let f = m.base(&mut fw, x).unwrap();
        let out = m.forward(&mut fw, x).unwrap();
        let f = fw.graph.value(f).clone();
        let (n, c, hw) = (2, 16, 64);
        let ca = m.channel.as_ref().unwrap();
        let (w1, b1, w2, b2) = (store.get(ca.w1), store.get(ca.b1), store.get(ca.w2), store.get(ca.b2));
        let hidden = b1.len();
        let mlp = |v: &[f64]| -> Vec<f64> {
            let h: Vec<f64> = (0..hidden)
                .map(|j| ((0..c).map(|i| w1.data()[j * c + i] * v[i]).sum::<f64>() + b1.data()[j]).max(0.0))
                .collect();
            (0..c)
                .map(|o| (0..hidden).map(|j| w2.data()[o * hidden + j] * h[j]).sum::<f64>() + b2.data()[o])
                .collect()
        };
        let sa = m.spatial.as_ref().unwrap();
        let (sw, sb) = (store.get(sa.w), store.get(sa.b).data()[0]);
        for b in 0..n {
            let plane = |ch: usize| &f.data()[(b * c + ch) * hw..][..hw];
            let avg: Vec<f64> = (0..c).map(|ch| plane(ch).iter().sum::<f64>() / hw as f64).collect();
            let max: Vec<f64> = (0..c).map(|ch| plane(ch).iter().cloned().fold(f64::MIN, f64::max)).collect();
            let (a, bb) = (mlp(&avg), mlp(&max));
            let gate: Vec<f64> = (0..c).map(|i| sigmoid_scalar(a[i]) + sigmoid_scalar(bb[i])).collect();
            let mid = |ch: usize, p: usize| gate[ch] * plane(ch)[p];
            let pooled: Vec<f64> = (0..hw)
                .map(|p| {
                    let col: Vec<f64> = (0..c).map(|ch| mid(ch, p)).collect();
                    col.iter().sum::<f64>() / c as f64 + col.iter().cloned().fold(f64::MIN, f64::max)
                })
                .collect();
            for y in 0..8i64 {
                for xx in 0..8i64 {
                    let mut acc = sb;
                    for ky in 0..7i64 {
                        for kx in 0..7i64 {
                            let (iy, ix) = (y + ky - 3, xx + kx - 3);
                            if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                acc += sw.data()[(ky * 7 + kx) as usize] * pooled[(iy * 8 + ix) as usize];
                            }
                        }
                    }
                    let s = sigmoid_scalar(acc);
                    let p = (y * 8 + xx) as usize;
                    for ch in 0..c {
                        let got = fw.graph.value(out).data()[(b * c + ch) * hw + p];
                        assert!((got - s * mid(ch, p)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn disabled_attention_is_base_only() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Mca::new(&mut store, "mca", 4, McaConfig::default(), false, &mut rng).unwrap();
        assert_eq!(store.len(), 3);
        let mut fw = Forward::new(&store, true, false);
        let x = fw.input(Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng));
        let a = m.forward(&mut fw, x).unwrap();
        let b = m.base(&mut fw, x).unwrap();
        assert_eq!(fw.graph.value(a), fw.graph.value(b));
    }

    #[test]
    fn gradients_through_both_attention_stages() {
        let (mut store, m) = build(4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng);
        let proj = Tensor::randn(&[2, 16, 8, 8], 1.0, &mut rng);
        let xin = store.add("input", ParamKind::Bias, x);
        let (err, name) = param_grad_check(
            &store,
            true,
            |fw| {
                let x = fw.param(xin);
                let y = m.forward(fw, x)?;
                let p = fw.input(proj.clone());
                let y = fw.graph.mul(y, p)?;
                Ok(fw.graph.sum(y))
            },
            |_| true,
            12,
            &[1e-6],
        )
        .unwrap();
        assert!(err < 1e-5, "{name}: {err}");
    }
}
