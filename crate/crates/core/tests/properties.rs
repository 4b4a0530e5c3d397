use cwssnet::autograd::Graph;
use cwssnet::data::{patch_origins, split_indices};
use cwssnet::metrics::ConfusionMatrix;
use cwssnet::network::accumulate_logits;
use cwssnet::wavelet::{dwt2, idwt2, wt_multilevel, SubbandSet, WaveletFamily};
use cwssnet::wtbc::{binarize, wtbc_param_count};
use cwssnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn family() -> impl Strategy<Value = WaveletFamily> {
    prop_oneof![Just(WaveletFamily::Haar), Just(WaveletFamily::Db2)]
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multilevel_round_trip(fam in family(), levels in 1usize..=3, mult in 1usize..=3, c in 1usize..=3, seed: u64) {
        let side = mult << levels;
        let x = randn(&[c, side, side], seed);
        let back = wt_multilevel(&x, levels, fam).unwrap().reconstruct().unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn analysis_preserves_energy(fam in family(), seed: u64) {
        let x = randn(&[2, 8, 12], seed);
        let s = dwt2(&x, fam).unwrap();
        prop_assert!((s.energy() - x.sq_norm()).abs() < 1e-9 * x.sq_norm());
    }

    #[test]
    fn inverse_is_linear(fam in family(), a in -3.0f64..3.0, b in -3.0f64..3.0, seed: u64) {
        let mk = |k: u64| {
            let t = |j: u64| randn(&[2, 4, 4], seed.wrapping_add(4 * k + j));
            SubbandSet { ll: t(0), lh: t(1), hl: t(2), hh: t(3) }
        };
        let (x, y) = (mk(0), mk(1));
        let lhs = idwt2(&x.scale(a).add(&y.scale(b)).unwrap(), fam).unwrap();
        let rhs = idwt2(&x, fam).unwrap().scale(a).add(&idwt2(&y, fam).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn parameter_ratio_is_exact(levels in 1usize..=6, k in 1usize..=9, c_in in 1usize..=64) {
        let r = wtbc_param_count(k << levels, levels, c_in).unwrap();
        let (num, den) = (4 * levels as u64, 1u64 << (2 * levels));
        let g = gcd(num, den);
        prop_assert_eq!(r.ratio, (num / g, den / g));
        prop_assert_eq!(r.p_wtbc * den, r.p_std * num);
        prop_assert_eq!(r.measured.binary as u64, r.p_wtbc);
    }

    #[test]
    fn binarized_weights_have_per_channel_magnitude(seed: u64, c in 1usize..=4, k in prop_oneof![Just(3usize), Just(5)]) {
        let w = randn(&[c, 1, k, k], seed);
        let (signs, alpha) = binarize(&w);
        prop_assert_eq!(alpha.len(), c);
        for (ch, chunk) in w.data().chunks(k * k).enumerate() {
            let mean = chunk.iter().map(|v| v.abs()).sum::<f64>() / chunk.len() as f64;
            prop_assert!((alpha[ch] - mean).abs() < 1e-12);
        }
        prop_assert!(signs.data().iter().all(|&s| s == 1.0 || s == -1.0));
    }

    #[test]
    fn metric_identities(counts in proptest::collection::vec(0u64..50, 16)) {
        let m = ConfusionMatrix::from_counts(4, counts).unwrap().compute();
        for c in &m.per_class {
            prop_assert!((c.f1 - 2.0 * c.iou / (1.0 + c.iou)).abs() < 1e-12);
            prop_assert!(c.iou <= c.f1 + 1e-15);
            prop_assert!((0.0..=1.0).contains(&c.iou) && (0.0..=1.0).contains(&c.acc));
        }
        prop_assert!(m.miou <= m.mf1 + 1e-15);
    }

    #[test]
    fn merged_matrices_add(
        a in proptest::collection::vec(0u8..3, 1..60),
        b in proptest::collection::vec(0u8..3, 1..60),
    ) {
        let mut whole = ConfusionMatrix::new(3);
        let mut left = ConfusionMatrix::new(3);
        let mut right = ConfusionMatrix::new(3);
        let gt_a: Vec<u8> = a.iter().rev().copied().collect();
        let gt_b: Vec<u8> = b.iter().rev().copied().collect();
        left.accumulate_slices(&a, &gt_a).unwrap();
        right.accumulate_slices(&b, &gt_b).unwrap();
        let pred: Vec<u8> = a.iter().chain(&b).copied().collect();
        let gt: Vec<u8> = gt_a.iter().chain(&gt_b).copied().collect();
        whole.accumulate_slices(&pred, &gt).unwrap();
        left.merge(&right).unwrap();
        prop_assert_eq!(left.total(), (a.len() + b.len()) as u64);
        prop_assert_eq!(left, whole);
    }

    #[test]
    fn split_is_a_partition(count in 2usize..200, frac in 0.05f64..0.95, seed: u64) {
        let (train, val) = split_indices(count, frac, seed).unwrap();
        prop_assert!(!train.is_empty() && !val.is_empty());
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..count).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(count, frac, seed).unwrap(), (train, val));
    }

    #[test]
    fn origins_cover_the_scene(rows in 8usize..70, cols in 8usize..70, size in 2usize..=8, stride in 1usize..=8) {
        prop_assume!(stride <= size);
        let origins = patch_origins(rows, cols, size, stride).unwrap();
        let mut seen = vec![false; rows * cols];
        for &(r, c) in &origins {
            prop_assert!(r + size <= rows && c + size <= cols);
            for y in r..r + size {
                for x in c..c + size {
                    seen[y * cols + x] = true;
                }
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn accumulated_logits_conserve_mass(seed: u64) {
        let origins = patch_origins(10, 12, 4, 3).unwrap();
        let logits = randn(&[origins.len(), 2, 4, 4], seed);
        let acc = accumulate_logits(10, 12, &origins, &logits).unwrap();
        prop_assert!((acc.sum() - logits.sum()).abs() < 1e-9);
    }

    #[test]
    fn sum_gradient_is_ones(seed: u64) {
        let mut g = Graph::new();
        let x = g.leaf(randn(&[3, 4], seed));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        prop_assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
