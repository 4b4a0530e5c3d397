//! Two-level encoder/decoder segmentation network.
//!
//! ```text
//! F1 = fuse(MCA1(X), WTBC1(X))        S
//! D1 = maxpool(F1)                    S/2
//! F2 = fuse(MCA2(D1), WTBC2(D1))      S/2
//! D2 = maxpool(F2)                    S/4
//! U1 = deconv(D2);  FU1 = conv(U1 ‖ F2)   S/2
//! U2 = deconv(FU1); FU2 = conv(U2 ‖ F1)   S
//! logits = conv1×1(FU2)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::{extract_input, patch_origins, LabelMap};
use crate::error::{Error, Result, StageExt};
use crate::fusion::{Fusion, FusionConfig};
use crate::mca::{Mca, McaConfig};
use crate::ops::conv::Conv2dSpec;
use crate::ops::pool::PoolMode;
use crate::params::{he_normal, Forward, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::wtbc::{Wtbc, WtbcConfig};

/// Module toggles of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Modules {
    pub mca: bool,
    pub wtbc: bool,
    pub fusion: bool,
}

impl Default for Modules {
    fn default() -> Self {
        Modules {
            mca: true,
            wtbc: true,
            fusion: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Input bands after PCA.
    pub bands: usize,
    pub classes: usize,
    /// Fused widths of the two encoder levels.
    pub widths: [usize; 2],
    pub modules: Modules,
    pub mca: McaConfig,
    pub wtbc: WtbcConfig,
    pub fusion: FusionConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            bands: 30,
            classes: 6,
            widths: [32, 64],
            modules: Modules::default(),
            mca: McaConfig::default(),
            wtbc: WtbcConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::precondition("network", "bands must be at least 1"));
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::precondition("network", "classes must be in 2..=255"));
        }
        if self.widths.contains(&0) {
            return Err(Error::precondition("network", "widths must be positive"));
        }
        if self.wtbc.levels == 0 {
            return Err(Error::precondition("network", "wtbc needs at least one level"));
        }
        Ok(())
    }

    /// Smallest unit every patch side must be a multiple of.
    pub fn size_unit(&self) -> usize {
        if self.modules.wtbc {
            4usize.max(1 << (self.wtbc.levels + 1))
        } else {
            4
        }
    }

    /// Kernel of the depthwise replacement for the wavelet branch: the
    /// receptive field `2^L · k` rounded up to odd.
    pub fn separable_kernel(&self) -> usize {
        let r = (1usize << self.wtbc.levels) * self.wtbc.kernels.ll.max(self.wtbc.kernels.high);
        r | 1
    }
}

/// Spatial-frequency branch of an encoder level.
#[derive(Clone, Debug)]
pub enum SpatialBranch {
    Wtbc(Wtbc),
    /// Depthwise `k×k` followed by a pointwise projection.
    Separable {
        depthwise: ParamId,
        pointwise: ParamId,
        bias: ParamId,
        channels: usize,
        out_channels: usize,
        kernel: usize,
    },
}

impl SpatialBranch {
    fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        match self {
            SpatialBranch::Wtbc(m) => m.forward(fw, x),
            SpatialBranch::Separable {
                depthwise,
                pointwise,
                bias,
                channels,
                out_channels,
                kernel,
            } => {
                let dw = fw.param(*depthwise);
                let y = fw.graph.conv2d(x, dw, None, Conv2dSpec::depthwise(*channels, *kernel))?;
                let (pw, b) = (fw.param(*pointwise), fw.param(*bias));
                fw.graph.conv2d(y, pw, Some(b), Conv2dSpec::new(*channels, *out_channels, 1))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub mca: Mca,
    pub spatial: SpatialBranch,
    pub fusion: Fusion,
}

impl EncoderLevel {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        width: usize,
        cfg: &NetworkConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mca = Mca::new(
            store,
            &format!("{prefix}.mca"),
            in_channels,
            cfg.mca.clone(),
            cfg.modules.mca,
            rng,
        )?;
        let spatial = if cfg.modules.wtbc {
            SpatialBranch::Wtbc(Wtbc::new(
                store,
                &format!("{prefix}.wtbc"),
                in_channels,
                width,
                cfg.wtbc.clone(),
                rng,
            )?)
        } else {
            let k = cfg.separable_kernel();
            SpatialBranch::Separable {
                depthwise: store.add(
                    format!("{prefix}.sep.depthwise"),
                    ParamKind::Weight,
                    he_normal(&[in_channels, 1, k, k], k * k, rng),
                ),
                pointwise: store.add(
                    format!("{prefix}.sep.pointwise"),
                    ParamKind::Weight,
                    he_normal(&[width, in_channels, 1, 1], in_channels, rng),
                ),
                bias: store.add(format!("{prefix}.sep.bias"), ParamKind::Bias, Tensor::zeros(&[width])),
                channels: in_channels,
                out_channels: width,
                kernel: k,
            }
        };
        let fusion = Fusion::new(
            store,
            &format!("{prefix}.fuse"),
            mca.out_channels,
            width,
            width,
            &cfg.fusion,
            cfg.modules.fusion,
            rng,
        )?;
        Ok(EncoderLevel { mca, spatial, fusion })
    }

    fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let m = self.mca.forward(fw, x)?;
        let w = self.spatial.forward(fw, x)?;
        self.fusion.forward(fw, m, w)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

fn conv_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    shape: [usize; 4],
    fan_in: usize,
    bias_len: usize,
    rng: &mut R,
) -> ConvParams {
    ConvParams {
        w: store.add(format!("{name}.weight"), ParamKind::Weight, he_normal(&shape, fan_in, rng)),
        b: store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[bias_len])),
    }
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Stages {
    pub f1: Var,
    pub d1: Var,
    pub f2: Var,
    pub d2: Var,
    pub u1: Var,
    pub fu1: Var,
    pub u2: Var,
    pub fu2: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub encoder: [EncoderLevel; 2],
    up1: ConvParams,
    dec1: ConvParams,
    up2: ConvParams,
    dec2: ConvParams,
    head: ConvParams,
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
}

impl Model {
    /// Builds and initializes every parameter from `seed`.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [w1, w2] = cfg.widths;
        let e1 = EncoderLevel::new(&mut store, "enc1", cfg.bands, w1, &cfg, &mut rng)?;
        let e2 = EncoderLevel::new(&mut store, "enc2", w1, w2, &cfg, &mut rng)?;
        let up1 = conv_params(&mut store, "dec.up1", [w2, w2, 2, 2], w2, w2, &mut rng);
        let dec1 = conv_params(&mut store, "dec.conv1", [w2, 2 * w2, 3, 3], 2 * w2 * 9, w2, &mut rng);
        let up2 = conv_params(&mut store, "dec.up2", [w2, w1, 2, 2], w2, w1, &mut rng);
        let dec2 = conv_params(&mut store, "dec.conv2", [w1, 2 * w1, 3, 3], 2 * w1 * 9, w1, &mut rng);
        let head = conv_params(&mut store, "head", [cfg.classes, w1, 1, 1], w1, cfg.classes, &mut rng);
        Ok(Model {
            net: Network {
                cfg,
                encoder: [e1, e2],
                up1,
                dec1,
                up2,
                dec2,
                head,
            },
            store,
        })
    }

    /// Eval-mode logits for `[N, B, S, S]` input, evaluated in chunks of `batch`.
    pub fn predict_logits(&self, input: &Tensor, batch: usize) -> Result<Tensor> {
        let n = input.dim(0);
        let per = input.len() / n;
        let mut out = Vec::new();
        let mut out_shape = Vec::new();
        for start in (0..n).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(n);
            let mut shape = input.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(&shape, input.data()[start * per..end * per].to_vec())?;
            let mut fw = Forward::new(&self.store, false, false);
            let x = fw.input(chunk);
            let y = self.net.forward(&mut fw, x)?;
            let v = fw.graph.value(y);
            out_shape = v.shape().to_vec();
            out.extend_from_slice(v.data());
        }
        out_shape[0] = n;
        Tensor::new(&out_shape, out)
    }

    /// Label map of a PCA-reduced `[M, N, B]` cube from overlapping patches.
    pub fn predict_scene(&self, cube: &Tensor, patch: usize, stride: usize, batch: usize) -> Result<LabelMap> {
        cube.expect_rank("predict_scene", 3)?;
        let (m, n) = (cube.dim(0), cube.dim(1));
        let origins = patch_origins(m, n, patch, stride)?;
        let input = extract_input(cube, &origins, patch)?;
        let logits = self.predict_logits(&input, batch)?;
        let acc = accumulate_logits(m, n, &origins, &logits)?;
        Ok(argmax_map(&acc))
    }
}

/// Sums per-patch logits `[P, C, S, S]` into a `[C, M, N]` scene tensor.
pub fn accumulate_logits(rows: usize, cols: usize, origins: &[(usize, usize)], logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank("accumulate_logits", 4)?;
    let (p, c, s) = (logits.dim(0), logits.dim(1), logits.dim(2));
    if p != origins.len() {
        return Err(Error::dim("accumulate_logits", "patches", origins.len(), p));
    }
    let mut acc = Tensor::zeros(&[c, rows, cols]);
    for (k, &(r0, c0)) in origins.iter().enumerate() {
        if r0 + s > rows || c0 + s > cols {
            return Err(Error::precondition("accumulate_logits", "patch outside the scene"));
        }
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    acc.data_mut()[(ch * rows + r0 + y) * cols + c0 + x] += logits.data()[((k * c + ch) * s + y) * s + x];
                }
            }
        }
    }
    Ok(acc)
}

/// Per-pixel argmax over the leading class axis of `[C, M, N]`; ties resolve
/// to the lowest class index.
pub fn argmax_map(scores: &Tensor) -> LabelMap {
    let (c, rows, cols) = (scores.dim(0), scores.dim(1), scores.dim(2));
    let plane = rows * cols;
    let data = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if scores.data()[k * plane + p] > scores.data()[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap { rows, cols, data }
}

impl Network {
    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::dim("network input", "rank", 4, shape.len()));
        }
        if shape[1] != self.cfg.bands {
            return Err(Error::dim("network input", "bands", self.cfg.bands, shape[1]));
        }
        let unit = self.cfg.size_unit();
        if shape[2] % unit != 0 || shape[3] % unit != 0 {
            return Err(Error::precondition(
                "network input",
                format!("patch {}x{} is not a multiple of {unit}", shape[2], shape[3]),
            ));
        }
        Ok(())
    }

    pub fn forward_stages(&self, fw: &mut Forward, x: Var) -> Result<Stages> {
        self.check_input(fw.graph.value(x).shape())?;
        let [w1, w2] = self.cfg.widths;
        let f1 = self.encoder[0].forward(fw, x).stage("encoder level 1")?;
        let d1 = fw.graph.pool2d(f1, PoolMode::Max).stage("pool 1")?;
        let f2 = self.encoder[1].forward(fw, d1).stage("encoder level 2")?;
        let d2 = fw.graph.pool2d(f2, PoolMode::Max).stage("pool 2")?;

        let u1 = self.deconv(fw, d2, self.up1).stage("upsample 1")?;
        let cat = fw.graph.concat(&[u1, f2]).stage("skip 1")?;
        let fu1 = self.conv_relu(fw, cat, self.dec1, 2 * w2, w2).stage("decoder conv 1")?;
        let u2 = self.deconv(fw, fu1, self.up2).stage("upsample 2")?;
        let cat = fw.graph.concat(&[u2, f1]).stage("skip 2")?;
        let fu2 = self.conv_relu(fw, cat, self.dec2, 2 * w1, w1).stage("decoder conv 2")?;

        let (hw, hb) = (fw.param(self.head.w), fw.param(self.head.b));
        let logits = fw
            .graph
            .conv2d(fu2, hw, Some(hb), Conv2dSpec::new(w1, self.cfg.classes, 1))
            .stage("head")?;
        Ok(Stages {
            f1,
            d1,
            f2,
            d2,
            u1,
            fu1,
            u2,
            fu2,
            logits,
        })
    }

    /// Logits `[N, C, S, S]` for input `[N, B, S, S]`.
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        Ok(self.forward_stages(fw, x)?.logits)
    }

    fn deconv(&self, fw: &mut Forward, x: Var, p: ConvParams) -> Result<Var> {
        let (w, b) = (fw.param(p.w), fw.param(p.b));
        fw.graph.conv_transpose2d(x, w, Some(b), 2)
    }

    fn conv_relu(&self, fw: &mut Forward, x: Var, p: ConvParams, cin: usize, cout: usize) -> Result<Var> {
        let (w, b) = (fw.param(p.w), fw.param(p.b));
        let y = fw.graph.conv2d(x, w, Some(b), Conv2dSpec::new(cin, cout, 3))?;
        Ok(fw.graph.relu(y))
    }

    /// Mean cross-entropy plus `λ·Σ‖W‖²` over the regularized parameters.
    pub fn loss(&self, fw: &mut Forward, logits: Var, labels: &[u8], lambda: f64) -> Result<Var> {
        let ce = fw.graph.cross_entropy(logits, labels).stage("loss")?;
        if lambda == 0.0 {
            return Ok(ce);
        }
        let regs = fw.regularized_vars();
        let l2 = fw.graph.sum_squares(&regs, lambda);
        fw.graph.add(ce, l2)
    }
}

/// Reorders `[N, S, S, B]` patches into the `[N, B, S, S]` network layout.
pub fn patches_to_input(patches: &Tensor) -> Result<Tensor> {
    patches.expect_rank("patches_to_input", 4)?;
    let (n, h, w, b) = (patches.dim(0), patches.dim(1), patches.dim(2), patches.dim(3));
    let plane = h * w;
    Ok(Tensor::from_fn(&[n, b, h, w], |i| {
        let (k, rest) = (i / (b * plane), i % (b * plane));
        let (band, p) = (rest / plane, rest % plane);
        patches.data()[(k * plane + p) * b + band]
    }))
}
