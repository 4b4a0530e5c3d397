//! Feature fusion of the attention stream and the wavelet stream.
//!
//! Both inputs are projected to a common width and concatenated. A bias-free
//! 1×1 MLP refines the concatenation, and average- and max-pooled descriptors
//! each produce a sigmoid channel gate. The two gated copies of the refined
//! features are added.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::conv::Conv2dSpec;
use crate::ops::pool::PoolMode;
use crate::params::{he_normal, Forward, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Reduction ratio of the gate branches.
    pub ratio: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { ratio: 8 }
    }
}

#[derive(Clone, Debug)]
pub struct GateBranch {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub enum FusionParams {
    Attention {
        proj_m: ParamId,
        proj_w: ParamId,
        refine1: ParamId,
        refine2: ParamId,
        gate_avg: GateBranch,
        gate_max: GateBranch,
    },
    Concat {
        weight: ParamId,
        bias: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub m_channels: usize,
    pub w_channels: usize,
    pub width: usize,
    pub params: FusionParams,
}

fn conv1x1<R: Rng + ?Sized>(store: &mut ParamStore, name: String, cin: usize, cout: usize, rng: &mut R) -> ParamId {
    store.add(name, ParamKind::Weight, he_normal(&[cout, cin, 1, 1], cin, rng))
}

impl Fusion {
    /// With `enabled` false the streams are concatenated and mixed by one 1×1 conv.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        m_channels: usize,
        w_channels: usize,
        width: usize,
        cfg: &FusionConfig,
        enabled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 || cfg.ratio == 0 {
            return Err(Error::precondition("fuse", "width and ratio must be positive"));
        }
        let params = if enabled {
            let hidden = (2 * width / cfg.ratio).max(1);
            let mut branch = |store: &mut ParamStore, tag: &str| GateBranch {
                w1: store.add(
                    format!("{prefix}.gate_{tag}.fc1.weight"),
                    ParamKind::Weight,
                    he_normal(&[hidden, 2 * width], 2 * width, rng),
                ),
                b1: store.add(format!("{prefix}.gate_{tag}.fc1.bias"), ParamKind::Bias, Tensor::zeros(&[hidden])),
                w2: store.add(
                    format!("{prefix}.gate_{tag}.fc2.weight"),
                    ParamKind::Weight,
                    he_normal(&[width, hidden], hidden, rng),
                ),
                b2: store.add(format!("{prefix}.gate_{tag}.fc2.bias"), ParamKind::Bias, Tensor::zeros(&[width])),
            };
            let gate_avg = branch(store, "avg");
            let gate_max = branch(store, "max");
            FusionParams::Attention {
                proj_m: conv1x1(store, format!("{prefix}.proj_m.weight"), m_channels, width, rng),
                proj_w: conv1x1(store, format!("{prefix}.proj_w.weight"), w_channels, width, rng),
                refine1: conv1x1(store, format!("{prefix}.refine1.weight"), 2 * width, width, rng),
                refine2: conv1x1(store, format!("{prefix}.refine2.weight"), width, width, rng),
                gate_avg,
                gate_max,
            }
        } else {
            FusionParams::Concat {
                weight: conv1x1(store, format!("{prefix}.mix.weight"), m_channels + w_channels, width, rng),
                bias: store.add(format!("{prefix}.mix.bias"), ParamKind::Bias, Tensor::zeros(&[width])),
            }
        };
        Ok(Fusion {
            m_channels,
            w_channels,
            width,
            params,
        })
    }

    fn check(&self, fw: &Forward, m: Var, w: Var) -> Result<()> {
        let (ms, ws) = (fw.graph.value(m).shape(), fw.graph.value(w).shape());
        if ms.len() != 4 || ws.len() != 4 || ms[0] != ws[0] || ms[2..] != ws[2..] {
            return Err(Error::Shape {
                op: "fuse",
                lhs: ms.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if ms[1] != self.m_channels {
            return Err(Error::dim("fuse", "mca channels", self.m_channels, ms[1]));
        }
        if ws[1] != self.w_channels {
            return Err(Error::dim("fuse", "wtbc channels", self.w_channels, ws[1]));
        }
        Ok(())
    }

    /// Sigmoid channel gate `[N, width]` from one pooled descriptor of `cat`.
    pub fn gate(&self, fw: &mut Forward, cat: Var, mode: PoolMode) -> Result<Var> {
        let FusionParams::Attention { gate_avg, gate_max, .. } = &self.params else {
            return Err(Error::precondition("fuse", "gates exist only in attention mode"));
        };
        let br = match mode {
            PoolMode::Avg => gate_avg,
            PoolMode::Max => gate_max,
        };
        let (w1, b1, w2, b2) = (fw.param(br.w1), fw.param(br.b1), fw.param(br.w2), fw.param(br.b2));
        let p = fw.graph.global_pool(cat, mode)?;
        let h = fw.graph.linear(p, w1, Some(b1))?;
        let h = fw.graph.relu(h);
        let g = fw.graph.linear(h, w2, Some(b2))?;
        Ok(fw.graph.sigmoid(g))
    }

    /// Projected concatenation `[N, 2·width, H, W]` and its refinement `[N, width, H, W]`.
    pub fn refine(&self, fw: &mut Forward, m: Var, w: Var) -> Result<(Var, Var)> {
        let FusionParams::Attention {
            proj_m,
            proj_w,
            refine1,
            refine2,
            ..
        } = &self.params
        else {
            return Err(Error::precondition("fuse", "refinement exists only in attention mode"));
        };
        let wd = self.width;
        let (pm, pw) = (fw.param(*proj_m), fw.param(*proj_w));
        let a = fw.graph.conv2d(m, pm, None, Conv2dSpec::new(self.m_channels, wd, 1))?;
        let b = fw.graph.conv2d(w, pw, None, Conv2dSpec::new(self.w_channels, wd, 1))?;
        let cat = fw.graph.concat(&[a, b])?;
        let (r1, r2) = (fw.param(*refine1), fw.param(*refine2));
        let h = fw.graph.conv2d(cat, r1, None, Conv2dSpec::new(2 * wd, wd, 1))?;
        let h = fw.graph.relu(h);
        let refined = fw.graph.conv2d(h, r2, None, Conv2dSpec::new(wd, wd, 1))?;
        Ok((cat, refined))
    }

    pub fn forward(&self, fw: &mut Forward, m: Var, w: Var) -> Result<Var> {
        self.check(fw, m, w)?;
        match &self.params {
            FusionParams::Concat { weight, bias } => {
                let cat = fw.graph.concat(&[m, w])?;
                let (wt, b) = (fw.param(*weight), fw.param(*bias));
                fw.graph.conv2d(
                    cat,
                    wt,
                    Some(b),
                    Conv2dSpec::new(self.m_channels + self.w_channels, self.width, 1),
                )
            }
            FusionParams::Attention { .. } => {
                let (cat, refined) = self.refine(fw, m, w)?;
                let ga = self.gate(fw, cat, PoolMode::Avg)?;
                let gm = self.gate(fw, cat, PoolMode::Max)?;
                let a = fw.graph.scale_channels(refined, ga)?;
                let b = fw.graph.scale_channels(refined, gm)?;
                fw.graph.add(a, b)
            }
        }
    }
}
