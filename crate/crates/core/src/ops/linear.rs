use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y = x·Wᵀ + b` for `x: [N, in]` (or `[in]`), `W: [out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    w.expect_rank("linear weight", 2)?;
    let (rows, fin, squeeze) = match *x.shape() {
        [f] => (1, f, true),
        [n, f] => (n, f, false),
        _ => return Err(Error::dim("linear", "rank", 2, x.rank())),
    };
    let (fout, wfin) = (w.dim(0), w.dim(1));
    if wfin != fin {
        return Err(Error::dim("linear", "in_features", wfin, fin));
    }
    if let Some(b) = b {
        if b.len() != fout {
            return Err(Error::dim("linear", "bias", fout, b.len()));
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; rows * fout];
    for r in 0..rows {
        let xr = &xd[r * fin..][..fin];
        for o in 0..fout {
            let wr = &wd[o * fin..][..fin];
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..fin {
                acc += wr[i] * xr[i];
            }
            out[r * fout + o] = acc;
        }
    }
    if squeeze {
        Tensor::new(&[fout], out)
    } else {
        Tensor::new(&[rows, fout], out)
    }
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, gout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let fin = w.dim(1);
    let fout = w.dim(0);
    let rows = x.len() / fin;
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[fout]);
    for r in 0..rows {
        for o in 0..fout {
            let g = gd[r * fout + o];
            db.data_mut()[o] += g;
            for i in 0..fin {
                dx.data_mut()[r * fin + i] += g * wd[o * fin + i];
                dw.data_mut()[o * fin + i] += g * xd[r * fin + i];
            }
        }
    }
    (dx, dw, db)
}

/// Two-layer perceptron `C -> C/r -> C` with a ReLU between the layers.
pub fn mlp2(
    x: &Tensor,
    w1: &Tensor,
    b1: Option<&Tensor>,
    w2: &Tensor,
    b2: Option<&Tensor>,
) -> Result<Tensor> {
    let hidden = super::activation::relu(&linear(x, w1, b1)?);
    linear(&hidden, w2, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::activation::relu;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> Tensor {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w1 = Tensor::randn(&[2, 16], 1.0, &mut rng);
        let w2 = Tensor::randn(&[16, 2], 1.0, &mut rng);
        let y = mlp2(&Tensor::zeros(&[16]), &w1, None, &w2, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_give_relu() {
        let x = Tensor::new(&[4], vec![-1.0, 2.0, -3.0, 4.0]).unwrap();
        let y = mlp2(&x, &eye(4), None, &eye(4), None).unwrap();
        assert_eq!(y, relu(&x));
    }

    #[test]
    fn matches_dense_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, r) = (16, 8);
        let x = Tensor::randn(&[3, c], 1.0, &mut rng);
        let w1 = Tensor::randn(&[c / r, c], 1.0, &mut rng);
        let b1 = Tensor::randn(&[c / r], 1.0, &mut rng);
        let w2 = Tensor::randn(&[c, c / r], 1.0, &mut rng);
        let b2 = Tensor::randn(&[c], 1.0, &mut rng);
        let y = mlp2(&x, &w1, Some(&b1), &w2, Some(&b2)).unwrap();
        for row in 0..3 {
            let xr = &x.data()[row * c..][..c];
            let h: Vec<f64> = (0..c / r)
                .map(|j| {
                    let s: f64 = (0..c).map(|i| w1.data()[j * c + i] * xr[i]).sum();
                    (s + b1.data()[j]).max(0.0)
                })
                .collect();
            for o in 0..c {
                let s: f64 = (0..c / r).map(|j| w2.data()[o * (c / r) + j] * h[j]).sum();
                assert!((y.data()[row * c + o] - (s + b2.data()[o])).abs() < 1e-12);
            }
        }
    }
}
