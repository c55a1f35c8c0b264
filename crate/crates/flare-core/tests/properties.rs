//! Randomized invariant checks for the tensor kernels and the mixer.
//!
//! Everything here is a property that must hold for arbitrary finite inputs,
//! not just the hand-picked fixtures of the unit tests: softmax rows are
//! distributions even at extreme magnitudes, matmul associates, the fused and
//! materialized mixer paths agree, and mixing is equivariant under token
//! permutations.

use flare_core::linalg::{matmul, row_softmax};
use flare_core::mixer::{communication_matrix, flare_mix_fused, flare_mix_materialized};
use flare_core::spectral::flare_spectrum;
use flare_core::Tensor;
use proptest::prelude::*;

fn tensor_strategy(
    shape: &'static [usize],
    lo: f64,
    hi: f64,
) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(lo..hi, n)
        .prop_map(move |data| Tensor::new(shape, data).unwrap())
}

/// Random matrix with proptest-chosen dimensions in the given ranges.
fn matrix_strategy(
    rows: std::ops::RangeInclusive<usize>,
    cols: std::ops::RangeInclusive<usize>,
    lo: f64,
    hi: f64,
) -> impl Strategy<Value = Tensor<f64>> {
    (rows, cols).prop_flat_map(move |(r, c)| {
        proptest::collection::vec(lo..hi, r * c)
            .prop_map(move |data| Tensor::new(&[r, c], data).unwrap())
    })
}

fn rank3_strategy(
    h: usize,
    n: usize,
    d: usize,
    lo: f64,
    hi: f64,
) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(lo..hi, h * n * d)
        .prop_map(move |data| Tensor::new(&[h, n, d], data).unwrap())
}

proptest! {
    // Softmax rows are probability distributions in double precision even
    // when entries span magnitudes up to 1e4.
    #[test]
    fn softmax_rows_sum_to_one_f64(x in matrix_strategy(1..=6, 1..=9, -1e4, 1e4)) {
        let p = row_softmax(&x).unwrap();
        for i in 0..p.rows() {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12, "row {} sums to {}", i, s);
            prop_assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    // Same property in single precision at the looser tolerance.
    #[test]
    fn softmax_rows_sum_to_one_f32(x in matrix_strategy(1..=6, 1..=9, -1e4, 1e4)) {
        let p = row_softmax(&x.cast::<f32>()).unwrap();
        for i in 0..p.rows() {
            let s: f32 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5, "row {} sums to {}", i, s);
        }
    }

    // (A·B)·C == A·(B·C) up to 1e-10 relative error in double precision.
    #[test]
    fn matmul_associativity(
        (a, b, c) in (1..=7usize, 1..=7usize, 1..=7usize, 1..=7usize).prop_flat_map(
            |(m, k, n, p)| {
                (
                    proptest::collection::vec(-2.0..2.0f64, m * k)
                        .prop_map(move |d| Tensor::new(&[m, k], d).unwrap()),
                    proptest::collection::vec(-2.0..2.0f64, k * n)
                        .prop_map(move |d| Tensor::new(&[k, n], d).unwrap()),
                    proptest::collection::vec(-2.0..2.0f64, n * p)
                        .prop_map(move |d| Tensor::new(&[n, p], d).unwrap()),
                )
            },
        )
    ) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = left.max_abs().max(right.max_abs()).max(1.0);
        let rel = left.max_abs_diff(&right).unwrap() / scale;
        prop_assert!(rel < 1e-10, "relative disagreement {}", rel);
    }

    // The fused path and the explicit-weight path are the same function.
    #[test]
    fn fused_equals_materialized(
        q in rank3_strategy(2, 5, 4, -2.0, 2.0),
        k in rank3_strategy(2, 19, 4, -2.0, 2.0),
        v in rank3_strategy(2, 19, 4, -2.0, 2.0),
    ) {
        let fused = flare_mix_fused(&q, &k, &v).unwrap();
        let (mat, _) = flare_mix_materialized(&q, &k, &v).unwrap();
        prop_assert!(fused.max_abs_diff(&mat).unwrap() < 1e-12);
    }

    // Permuting the token rows of K and V permutes the output rows the same
    // way; the latent queries carry no positional structure.
    #[test]
    fn mixer_is_permutation_equivariant(
        q in rank3_strategy(2, 3, 4, -2.0, 2.0),
        k in rank3_strategy(2, 11, 4, -2.0, 2.0),
        v in rank3_strategy(2, 11, 4, -2.0, 2.0),
        perm in Just(()).prop_perturb(|_, mut rng| {
            let mut idx: Vec<usize> = (0..11).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            idx
        }),
    ) {
        let base = flare_mix_fused(&q, &k, &v).unwrap();
        let kp = permute_tokens(&k, &perm);
        let vp = permute_tokens(&v, &perm);
        let permuted = flare_mix_fused(&q, &kp, &vp).unwrap();
        let expect = permute_tokens(&base, &perm);
        prop_assert!(permuted.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    // The explicit token-communication matrix is row-stochastic, essentially
    // nonnegative, and its spectrum lies in [0, 1] within rounding slack.
    #[test]
    fn communication_matrix_is_stochastic_with_unit_spectrum(
        q in tensor_strategy(&[4, 3], -2.0, 2.0),
        k in tensor_strategy(&[13, 3], -2.0, 2.0),
    ) {
        let w = communication_matrix(&q, &k).unwrap();
        for i in 0..w.rows() {
            let s: f64 = w.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "row {} sums to {}", i, s);
            prop_assert!(w.row(i).iter().all(|&v| v >= -1e-12));
        }
        let spec = flare_spectrum(&q, &k).unwrap();
        for &lam in &spec.eigenvalues {
            prop_assert!((-1e-8..=1.0 + 1e-8).contains(&lam), "eigenvalue {}", lam);
        }
    }
}

fn permute_tokens(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (h, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(n, perm.len());
    let mut out = Tensor::zeros(&[h, n, d]);
    for hh in 0..h {
        for (dst, &src) in perm.iter().enumerate() {
            let from = hh * n * d + src * d;
            let to = hh * n * d + dst * d;
            out.data_mut()[to..to + d].copy_from_slice(&x.data()[from..from + d]);
        }
    }
    out
}

/// Fixed-size agreement sweep between the two mixer paths, double and single
/// precision, spanning small through large token counts.
#[test]
fn fused_materialized_agreement_across_sizes() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(404);
    for &(n, m, h, d) in &[(33usize, 4usize, 1usize, 4usize), (257, 16, 4, 8), (1024, 64, 8, 8)] {
        let fill = |shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
            let len: usize = shape.iter().product();
            Tensor::<f64>::new(shape, (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .unwrap()
        };
        let q = fill(&[h, m, d], &mut rng);
        let k = fill(&[h, n, d], &mut rng);
        let v = fill(&[h, n, d], &mut rng);

        let fused = flare_mix_fused(&q, &k, &v).unwrap();
        let (mat, _) = flare_mix_materialized(&q, &k, &v).unwrap();
        assert!(
            fused.max_abs_diff(&mat).unwrap() < 1e-12,
            "double disagreement at (n={}, m={}, h={}, d={})",
            n, m, h, d
        );

        let fused32 = flare_mix_fused(&q.cast::<f32>(), &k.cast(), &v.cast()).unwrap();
        let (mat32, _) =
            flare_mix_materialized(&q.cast::<f32>(), &k.cast(), &v.cast()).unwrap();
        assert!(
            fused32.max_abs_diff(&mat32).unwrap() < 1e-5,
            "single disagreement at (n={}, m={}, h={}, d={})",
            n, m, h, d
        );
    }
}
