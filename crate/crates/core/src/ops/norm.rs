use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }
}

pub struct BatchNormOut {
    pub y: Tensor,
    /// Normalized input before the affine map.
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// Updated running statistics (training mode only).
    pub updated: Option<RunningStats>,
}

fn layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::dim("batch_norm", "rank", 4, x.rank()));
    }
    Ok((x.dim(0), x.dim(1), x.shape()[2..].iter().product()))
}

/// Batch normalization over `[N, C, ...]`: statistics per channel across the
/// batch and all trailing axes.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    training: bool,
) -> Result<BatchNormOut> {
    let (n, c, inner) = layout(x)?;
    for (t, name) in [(gamma, "gamma"), (beta, "beta"), (&running.mean, "running_mean"), (&running.var, "running_var")] {
        if t.len() != c {
            return Err(Error::Dim {
                op: "batch_norm",
                axis: name,
                expected: c,
                got: t.len(),
            });
        }
    }
    let m = n * inner;
    if training && m < 2 {
        return Err(Error::precondition(
            "batch_norm",
            "training mode needs at least two elements per channel",
        ));
    }
    let xd = x.data();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0; c];
    let mut new_mean = running.mean.clone();
    let mut new_var = running.var.clone();
    for ch in 0..c {
        let (mean, var) = if training {
            let mut s = 0.0;
            for bi in 0..n {
                s += xd[(bi * c + ch) * inner..][..inner].iter().sum::<f64>();
            }
            let mean = s / m as f64;
            let mut ss = 0.0;
            for bi in 0..n {
                ss += xd[(bi * c + ch) * inner..][..inner]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            let var = ss / m as f64;
            let unbiased = ss / (m - 1) as f64;
            new_mean.data_mut()[ch] =
                BN_MOMENTUM * running.mean.data()[ch] + (1.0 - BN_MOMENTUM) * mean;
            new_var.data_mut()[ch] =
                BN_MOMENTUM * running.var.data()[ch] + (1.0 - BN_MOMENTUM) * unbiased;
            (mean, var)
        } else {
            (running.mean.data()[ch], running.var.data()[ch])
        };
        let is = 1.0 / (var + BN_EPSILON).sqrt();
        inv_std[ch] = is;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for bi in 0..n {
            let off = (bi * c + ch) * inner;
            for i in off..off + inner {
                let h = (xd[i] - mean) * is;
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + b;
            }
        }
    }
    Ok(BatchNormOut {
        y,
        xhat,
        inv_std,
        updated: training.then_some(RunningStats {
            mean: new_mean,
            var: new_var,
        }),
    })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    gout: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    training: bool,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, inner) = layout(gout).expect("validated in forward");
    let m = (n * inner) as f64;
    let gd = gout.data();
    let hd = xhat.data();
    let mut dx = Tensor::zeros(gout.shape());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gh = 0.0;
        for bi in 0..n {
            let off = (bi * c + ch) * inner;
            for i in off..off + inner {
                sum_g += gd[i];
                sum_gh += gd[i] * hd[i];
            }
        }
        dgamma[ch] = sum_gh;
        dbeta[ch] = sum_g;
        let scale = gamma.data()[ch] * inv_std[ch];
        for bi in 0..n {
            let off = (bi * c + ch) * inner;
            for i in off..off + inner {
                dx.data_mut()[i] = if training {
                    scale * (gd[i] - sum_g / m - hd[i] * sum_gh / m)
                } else {
                    scale * gd[i]
                };
            }
        }
    }
    (
        dx,
        Tensor::new(&[c], dgamma).expect("c > 0"),
        Tensor::new(&[c], dbeta).expect("c > 0"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(c: usize) -> (Tensor, Tensor, RunningStats) {
        (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]), RunningStats::new(c))
    }

    #[test]
    fn standardized_input_passes_through() {
        // Per channel: values {-1, 1} have mean 0 and biased variance 1.
        let x = Tensor::new(&[2, 2, 1, 1], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let (g, b, rs) = identity(2);
        let out = batch_norm(&x, &g, &b, &rs, true).unwrap();
        assert!(out.y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::full(&[3, 2, 2, 2], 7.5);
        let g = Tensor::full(&[2], 2.0);
        let b = Tensor::new(&[2], vec![0.25, -1.0]).unwrap();
        let out = batch_norm(&x, &g, &b, &RunningStats::new(2), true).unwrap();
        for bi in 0..3 {
            for ch in 0..2 {
                for i in 0..4 {
                    assert_eq!(out.y.data()[(bi * 2 + ch) * 4 + i], b.data()[ch]);
                }
            }
        }
    }

    #[test]
    fn matches_direct_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[4, 3, 5, 5], 2.0, &mut rng);
        let g = Tensor::randn(&[3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let out = batch_norm(&x, &g, &b, &RunningStats::new(3), true).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|bi| x.data()[(bi * 3 + ch) * 25..][..25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for bi in 0..4 {
                for i in 0..25 {
                    let at = (bi * 3 + ch) * 25 + i;
                    let want = g.data()[ch] * (x.data()[at] - mean) / (var + BN_EPSILON).sqrt()
                        + b.data()[ch];
                    assert!((out.y.data()[at] - want).abs() < 1e-10);
                }
            }
            let rs = out.updated.as_ref().unwrap();
            let unbiased = var * vals.len() as f64 / (vals.len() - 1) as f64;
            assert!((rs.mean.data()[ch] - 0.1 * mean).abs() < 1e-12);
            assert!((rs.var.data()[ch] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_element_training_is_rejected() {
        let (g, b, rs) = identity(2);
        assert!(batch_norm(&Tensor::zeros(&[1, 2, 1, 1]), &g, &b, &rs, true).is_err());
        assert!(batch_norm(&Tensor::zeros(&[1, 2, 1, 1]), &g, &b, &rs, false).is_ok());
    }

    #[test]
    fn eval_mode_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rs = RunningStats {
            mean: Tensor::new(&[2], vec![0.5, -0.2]).unwrap(),
            var: Tensor::new(&[2], vec![4.0, 0.25]).unwrap(),
        };
        let g = Tensor::new(&[2], vec![1.5, -0.5]).unwrap();
        let b = Tensor::new(&[2], vec![0.1, 0.2]).unwrap();
        let x = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let y1 = batch_norm(&x, &g, &b, &rs, false).unwrap().y;
        let y2 = batch_norm(&x, &g, &b, &rs, false).unwrap().y;
        assert_eq!(y1, y2);
        // f(x1 + x2) - f(0) == (f(x1) - f(0)) + (f(x2) - f(0))
        let z = batch_norm(&Tensor::zeros(&[1, 2, 3, 3]), &g, &b, &rs, false).unwrap().y;
        let x2 = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let y12 = batch_norm(&x.add(&x2).unwrap(), &g, &b, &rs, false).unwrap().y;
        let y2b = batch_norm(&x2, &g, &b, &rs, false).unwrap().y;
        let lhs = y12.sub(&z).unwrap();
        let rhs = y1.sub(&z).unwrap().add(&y2b.sub(&z).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
