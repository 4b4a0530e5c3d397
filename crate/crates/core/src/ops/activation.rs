use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value excluded from the loss and from metrics.
pub const IGNORE_LABEL: u8 = 255;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// `(outer, classes, inner)` split of a tensor around its class axis.
fn class_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    Ok(match s.len() {
        1 => (1, s[0], 1),
        2 => (s[0], s[1], 1),
        3 => (1, s[0], s[1] * s[2]),
        4 => (s[0], s[1], s[2] * s[3]),
        r => return Err(Error::dim("softmax", "rank", 4, r)),
    })
}

/// Softmax over the class axis (axis 0 for unbatched tensors, axis 1 otherwise),
/// max-subtracted.
pub fn softmax_classes(x: &Tensor) -> Result<Tensor> {
    let (outer, classes, inner) = class_layout(x)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * classes + k) * inner + i;
            let m = (0..classes).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..classes {
                let e = (d[at(k)] - m).exp();
                d[at(k)] = e;
                z += e;
            }
            for k in 0..classes {
                d[at(k)] /= z;
            }
        }
    }
    Ok(out)
}

/// Mean pixel cross-entropy of `[N,C,H,W]` logits against `N·H·W` labels,
/// skipping [`IGNORE_LABEL`]. Returns the loss and `d loss / d logits`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    logits.expect_rank("cross_entropy", 4)?;
    let (n, c, inner) = (logits.dim(0), logits.dim(1), logits.dim(2) * logits.dim(3));
    if labels.len() != n * inner {
        return Err(Error::dim("cross_entropy", "labels", n * inner, labels.len()));
    }
    let mut probs = softmax_classes(logits)?;
    let ld = logits.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for o in 0..n {
        for i in 0..inner {
            let y = labels[o * inner + i];
            if y == IGNORE_LABEL {
                continue;
            }
            if y as usize >= c {
                return Err(Error::precondition(
                    "cross_entropy",
                    format!("label {y} outside [0, {c})"),
                ));
            }
            let at = |k: usize| (o * c + k) * inner + i;
            let m = (0..c).map(|k| ld[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|k| (ld[at(k)] - m).exp()).sum::<f64>().ln();
            total += lse - ld[at(y as usize)];
            count += 1;
        }
    }
    let pd = probs.data_mut();
    if count == 0 {
        pd.iter_mut().for_each(|v| *v = 0.0);
        return Ok((0.0, probs));
    }
    let inv = 1.0 / count as f64;
    for o in 0..n {
        for i in 0..inner {
            let y = labels[o * inner + i];
            for k in 0..c {
                let at = (o * c + k) * inner + i;
                if y == IGNORE_LABEL {
                    pd[at] = 0.0;
                } else {
                    let onehot = if k == y as usize { 1.0 } else { 0.0 };
                    pd[at] = (pd[at] - onehot) * inv;
                }
            }
        }
    }
    Ok((total * inv, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn equal_logits_give_uniform_distribution() {
        let p = softmax_classes(&Tensor::full(&[6], 0.3)).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_sums_to_one_for_large_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 5, 3, 3], 1e3, &mut rng);
        let p = softmax_classes(&x).unwrap();
        for o in 0..2 {
            for i in 0..9 {
                let s: f64 = (0..5).map(|k| p.data()[(o * 5 + k) * 9 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!((0..5).all(|k| p.data()[(o * 5 + k) * 9 + i] >= 0.0));
            }
        }
    }

    #[test]
    fn uniform_logits_cost_log_classes() {
        let (l, _) = softmax_cross_entropy(&Tensor::zeros(&[1, 6, 2, 2]), &[0, 1, 2, 5]).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        assert!((l - 1.791759).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let mut x = Tensor::zeros(&[1, 3, 1, 1]);
        x.data_mut()[2] = 1e3;
        let (l, _) = softmax_cross_entropy(&x, &[2]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn ignore_label_and_range_check() {
        let x = Tensor::zeros(&[1, 2, 1, 2]);
        let (l, g) = softmax_cross_entropy(&x, &[IGNORE_LABEL, IGNORE_LABEL]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.sum(), 0.0);
        assert!(softmax_cross_entropy(&x, &[0, 2]).is_err());
    }
}
