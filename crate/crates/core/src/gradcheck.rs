//! Finite-difference audits of every differentiable tape operation and of a
//! small end-to-end network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{grad_check, Graph, Var};
use crate::error::Result;
use crate::network::{Model, Modules, NetworkConfig};
use crate::ops::{Conv2dSpec, Conv3dSpec, Padding, PoolMode, RunningStats, IGNORE_LABEL};
use crate::params::{param_grad_check, ParamKind};
use crate::tensor::Tensor;
use crate::wavelet::WaveletFamily;
use crate::wtbc::{KernelSet, WtbcConfig};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-4;
const NETWORK_STEPS: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error between tape and central-difference gradients.
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

/// Sum of the output weighted by a fixed pseudo-random tensor, so every
/// output coordinate contributes an O(1) gradient.
fn readout(g: &mut Graph, y: Var) -> Result<Var> {
    let w = Tensor::randn(g.value(y).shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(0x5eed));
    let c = g.constant(w);
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

/// Entries with pairwise gaps of at least `0.05`, so max selections and
/// ReLU signs stay put under perturbation.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let half = n as f64 / 2.0;
    Tensor::from_fn(shape, |i| (idx[i] as f64 - half + 0.5) * 0.05)
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<CheckResult>,
}

impl Suite {
    fn randn(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }

    fn check<F>(&mut self, name: &str, input: &Tensor, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let error = grad_check(
            |g, x| {
                let y = f(g, x)?;
                if g.value(y).len() == 1 {
                    Ok(y)
                } else {
                    readout(g, y)
                }
            },
            input,
            EPS,
        )?;
        self.out.push(CheckResult {
            name: name.to_string(),
            error,
            tolerance: OP_TOLERANCE,
        });
        Ok(())
    }
}

/// Checks each operation with respect to each of its differentiable inputs.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };
    let x4 = s.randn(&[2, 4, 6, 6]);
    let other = s.randn(&[2, 4, 6, 6]);

    s.check("add", &x4, |g, x| {
        let c = g.constant(other.clone());
        g.add(x, c)
    })?;
    s.check("mul", &x4, |g, x| {
        let c = g.constant(other.clone());
        g.mul(x, c)
    })?;
    s.check("scale", &x4, |g, x| Ok(g.scale(x, -1.7)))?;
    s.check("sigmoid", &x4, |g, x| Ok(g.sigmoid(x)))?;
    let sep = separated(&[2, 4, 6, 6], &mut s.rng);
    s.check("relu", &sep, |g, x| Ok(g.relu(x)))?;
    s.check("sum", &x4, |g, x| Ok(g.sum(x)))?;

    let spec = Conv2dSpec::new(4, 6, 3);
    let (w, b) = (s.randn(&spec.weight_shape()), s.randn(&[6]));
    s.check("conv2d.input", &x4, |g, x| {
        let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
        g.conv2d(x, w, Some(b), spec)
    })?;
    s.check("conv2d.weight", &w, |g, w| {
        let (x, b) = (g.constant(x4.clone()), g.constant(b.clone()));
        g.conv2d(x, w, Some(b), spec)
    })?;
    s.check("conv2d.bias", &b, |g, b| {
        let (x, w) = (g.constant(x4.clone()), g.constant(w.clone()));
        g.conv2d(x, w, Some(b), spec)
    })?;
    let grouped = Conv2dSpec::new(4, 4, 3).with_groups(2).with_padding(Padding::Valid);
    let wg = s.randn(&grouped.weight_shape());
    s.check("conv2d.grouped_valid.input", &x4, |g, x| {
        let w = g.constant(wg.clone());
        g.conv2d(x, w, None, grouped)
    })?;
    s.check("conv2d.grouped_valid.weight", &wg, |g, w| {
        let x = g.constant(x4.clone());
        g.conv2d(x, w, None, grouped)
    })?;

    let x5 = s.randn(&[2, 2, 5, 4, 4]);
    let spec3 = Conv3dSpec::new(2, 3, (3, 3, 3)).with_depth_stride(2);
    let (w3, b3) = (s.randn(&spec3.weight_shape()), s.randn(&[3]));
    s.check("conv3d.input", &x5, |g, x| {
        let (w, b) = (g.constant(w3.clone()), g.constant(b3.clone()));
        g.conv3d(x, w, Some(b), spec3)
    })?;
    s.check("conv3d.weight", &w3, |g, w| {
        let (x, b) = (g.constant(x5.clone()), g.constant(b3.clone()));
        g.conv3d(x, w, Some(b), spec3)
    })?;
    s.check("conv3d.bias", &b3, |g, b| {
        let (x, w) = (g.constant(x5.clone()), g.constant(w3.clone()));
        g.conv3d(x, w, Some(b), spec3)
    })?;

    let (wt, bt) = (s.randn(&[4, 3, 2, 2]), s.randn(&[3]));
    s.check("conv_transpose2d.input", &x4, |g, x| {
        let (w, b) = (g.constant(wt.clone()), g.constant(bt.clone()));
        g.conv_transpose2d(x, w, Some(b), 2)
    })?;
    s.check("conv_transpose2d.weight", &wt, |g, w| {
        let (x, b) = (g.constant(x4.clone()), g.constant(bt.clone()));
        g.conv_transpose2d(x, w, Some(b), 2)
    })?;
    s.check("conv_transpose2d.bias", &bt, |g, b| {
        let (x, w) = (g.constant(x4.clone()), g.constant(wt.clone()));
        g.conv_transpose2d(x, w, Some(b), 2)
    })?;

    for (mode, tag) in [(PoolMode::Max, "max"), (PoolMode::Avg, "avg")] {
        s.check(&format!("pool2d.{tag}"), &sep, |g, x| g.pool2d(x, mode))?;
        s.check(&format!("global_pool.{tag}"), &sep, |g, x| g.global_pool(x, mode))?;
        s.check(&format!("channel_pool.{tag}"), &sep, |g, x| g.channel_pool(x, mode))?;
    }

    let (gamma, beta) = (s.randn(&[4]), s.randn(&[4]));
    let running = RunningStats {
        mean: s.randn(&[4]),
        var: Tensor::uniform(&[4], 0.5, 2.0, &mut s.rng),
    };
    for (training, tag) in [(true, "train"), (false, "eval")] {
        let run = &running;
        s.check(&format!("batch_norm.{tag}.input"), &x4, |g, x| {
            let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            Ok(g.batch_norm(x, ga, be, run, training)?.0)
        })?;
        s.check(&format!("batch_norm.{tag}.gamma"), &gamma, |g, ga| {
            let (x, be) = (g.constant(x4.clone()), g.constant(beta.clone()));
            Ok(g.batch_norm(x, ga, be, run, training)?.0)
        })?;
        s.check(&format!("batch_norm.{tag}.beta"), &beta, |g, be| {
            let (x, ga) = (g.constant(x4.clone()), g.constant(gamma.clone()));
            Ok(g.batch_norm(x, ga, be, run, training)?.0)
        })?;
    }

    let (xl, wl, bl) = (s.randn(&[3, 5]), s.randn(&[4, 5]), s.randn(&[4]));
    s.check("linear.input", &xl, |g, x| {
        let (w, b) = (g.constant(wl.clone()), g.constant(bl.clone()));
        g.linear(x, w, Some(b))
    })?;
    s.check("linear.weight", &wl, |g, w| {
        let (x, b) = (g.constant(xl.clone()), g.constant(bl.clone()));
        g.linear(x, w, Some(b))
    })?;
    s.check("linear.bias", &bl, |g, b| {
        let (x, w) = (g.constant(xl.clone()), g.constant(wl.clone()));
        g.linear(x, w, Some(b))
    })?;

    let (gc, gs) = (s.randn(&[2, 4]), s.randn(&[2, 1, 6, 6]));
    s.check("scale_channels.input", &x4, |g, x| {
        let c = g.constant(gc.clone());
        g.scale_channels(x, c)
    })?;
    s.check("scale_channels.gate", &gc, |g, c| {
        let x = g.constant(x4.clone());
        g.scale_channels(x, c)
    })?;
    s.check("scale_spatial.input", &x4, |g, x| {
        let c = g.constant(gs.clone());
        g.scale_spatial(x, c)
    })?;
    s.check("scale_spatial.gate", &gs, |g, c| {
        let x = g.constant(x4.clone());
        g.scale_spatial(x, c)
    })?;

    let side = s.randn(&[2, 3, 6, 6]);
    s.check("concat", &x4, |g, x| {
        let c = g.constant(side.clone());
        let y = g.concat(&[c, x, c])?;
        Ok(g.sigmoid(y))
    })?;
    s.check("slice_channels", &x4, |g, x| g.slice_channels(x, 1, 2))?;
    s.check("reshape", &x4, |g, x| g.reshape(x, &[8, 36]))?;

    let xw = s.randn(&[2, 3, 8, 8]);
    let (ll, high) = (s.randn(&[2, 3, 4, 4]), s.randn(&[2, 9, 4, 4]));
    for fam in [WaveletFamily::Haar, WaveletFamily::Db2] {
        s.check(&format!("dwt2.{}", fam.name()), &xw, |g, x| g.dwt2(x, fam))?;
        s.check(&format!("idwt2.{}.ll", fam.name()), &ll, |g, l| {
            let h = g.constant(high.clone());
            g.idwt2(l, h, fam)
        })?;
        s.check(&format!("idwt2.{}.high", fam.name()), &high, |g, h| {
            let l = g.constant(ll.clone());
            g.idwt2(l, h, fam)
        })?;
    }

    let logits = s.randn(&[2, 3, 4, 4]);
    let labels: Vec<u8> = (0..32)
        .map(|i| if i % 7 == 0 { IGNORE_LABEL } else { (i % 3) as u8 })
        .collect();
    s.check("cross_entropy", &logits, |g, z| g.cross_entropy(z, &labels))?;
    s.check("sum_squares", &x4, |g, x| {
        let c = g.constant(other.clone());
        Ok(g.sum_squares(&[x, c, x], 0.3))
    })?;
    Ok(s.out)
}

/// Configuration of the tiny network used by [`tiny_network_check`].
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        bands: 4,
        classes: 3,
        widths: [8, 16],
        modules: Modules::default(),
        wtbc: WtbcConfig {
            levels: 1,
            kernels: KernelSet::K3,
            ..WtbcConfig::default()
        },
        ..NetworkConfig::default()
    }
}

/// End-to-end check of the full loss (cross-entropy plus weight penalty) on
/// an `8x8` input in training mode. Binary kernels are skipped: their tape
/// gradient is the straight-through surrogate, not the derivative.
pub fn tiny_network_check(seed: u64, per_param: usize) -> Result<CheckResult> {
    let model = Model::new(tiny_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng);
    let labels: Vec<u8> = (0..128).map(|_| rng.random_range(0..3)).collect();
    let (error, worst) = param_grad_check(
        &model.store,
        true,
        |fw| {
            let input = fw.input(x.clone());
            let logits = model.net.forward(fw, input)?;
            model.net.loss(fw, logits, &labels, 1e-2)
        },
        |e| e.kind != ParamKind::BinaryWeight,
        per_param,
        &NETWORK_STEPS,
    )?;
    Ok(CheckResult {
        name: format!("network (worst at {worst})"),
        error,
        tolerance: NETWORK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_values_are_distinct_and_spaced() {
        let t = separated(&[3, 4], &mut ChaCha8Rng::seed_from_u64(0));
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        assert!(v.windows(2).all(|w| w[1] - w[0] > 0.049));
        assert!(v.iter().all(|x| x.abs() > 0.02));
    }

    #[test]
    fn every_operation_passes() {
        let results = op_suite(11).unwrap();
        assert!(results.len() > 40);
        for r in &results {
            assert!(r.passed(), "{} error {:e}", r.name, r.error);
        }
    }

    #[test]
    fn tiny_network_passes() {
        let r = tiny_network_check(3, 4).unwrap();
        assert!(r.passed(), "{} error {:e}", r.name, r.error);
    }
}
