//! Property tests for the kernel algebra and format round trips.

use convdec::data::{load_idx_images, save_idx_images, RawImages};
use convdec::tensor::{
    correlate_valid, max_pool, normalize_range, softmax, substitute, upsample2x, FilterBank,
    Interp, Tensor3,
};
use proptest::prelude::*;

fn plane(h: usize, w: usize) -> impl Strategy<Value = Tensor3> {
    proptest::collection::vec(-1.0f64..1.0, h * w)
        .prop_map(move |v| Tensor3::new(h, w, 1, v).unwrap())
}

fn small_plane() -> impl Strategy<Value = Tensor3> {
    (1usize..=5, 1usize..=5).prop_flat_map(|(h, w)| plane(h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // substitute(A, f) grows dims by (h-1, w-1) and commutes.
    #[test]
    fn substitution_shape_and_commutativity(a in small_plane(), f in small_plane()) {
        let af = substitute(&a, &f).unwrap();
        prop_assert_eq!(af.height(), a.height() + f.height() - 1);
        prop_assert_eq!(af.width(), a.width() + f.width() - 1);
        let fa = substitute(&f, &a).unwrap();
        prop_assert!(af.max_abs_diff(&fa) < 1e-9);
    }

    // substitute is bilinear in the map argument.
    #[test]
    fn substitution_is_bilinear(
        a in plane(8, 8),
        b in plane(8, 8),
        f in small_plane(),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let mixed = Tensor3::from_fn(8, 8, 1, |y, x, _| {
            alpha * a.get(y, x, 0) + beta * b.get(y, x, 0)
        });
        let lhs = substitute(&mixed, &f).unwrap();
        let sa = substitute(&a, &f).unwrap();
        let sb = substitute(&b, &f).unwrap();
        let rhs = Tensor3::from_fn(lhs.height(), lhs.width(), 1, |y, x, _| {
            alpha * sa.get(y, x, 0) + beta * sb.get(y, x, 0)
        });
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    // The algebraic fact behind decoding: correlating twice equals
    // correlating once with the substituted filter.
    #[test]
    fn correlation_composes_through_substitution(
        image in plane(12, 12),
        f1 in (2usize..=4, 2usize..=4).prop_flat_map(|(h, w)| plane(h, w)),
        f2 in (2usize..=3, 2usize..=3).prop_flat_map(|(h, w)| plane(h, w)),
    ) {
        let b1 = FilterBank::unbiased(vec![f1.clone()]).unwrap();
        let b2 = FilterBank::unbiased(vec![f2.clone()]).unwrap();
        let two = correlate_valid(
            &correlate_valid(&image, &b1, 1, false).unwrap(),
            &b2,
            1,
            false,
        )
        .unwrap();
        let merged = FilterBank::unbiased(vec![substitute(&f1, &f2).unwrap()]).unwrap();
        let one = correlate_valid(&image, &merged, 1, false).unwrap();
        prop_assert!(two.max_abs_diff(&one) < 1e-9);
    }

    // Nearest upsampling is exactly inverted by max pooling.
    #[test]
    fn pool_inverts_nearest_upsample(x in (1usize..=6, 1usize..=6).prop_flat_map(|(h, w)| plane(h, w))) {
        let up = upsample2x(&x, Interp::Nearest).unwrap();
        let down = max_pool(&up).unwrap();
        prop_assert_eq!(down.max_abs_diff(&x), 0.0);
    }

    // Unit DC gain for every interpolation method.
    #[test]
    fn upsampling_preserves_constants(v in -5.0f64..5.0, h in 1usize..=6, w in 1usize..=6) {
        let x = Tensor3::from_fn(h, w, 1, |_, _, _| v);
        for m in Interp::ALL {
            let up = upsample2x(&x, m).unwrap();
            for &s in up.values() {
                prop_assert!((s - v).abs() < 1e-12);
            }
        }
    }

    // Softmax sums to one and is permutation-equivariant.
    #[test]
    fn softmax_normalizes_and_permutes(mut logits in proptest::collection::vec(-30.0f64..30.0, 2..24)) {
        let t = Tensor3::new(1, 1, logits.len(), logits.clone()).unwrap();
        let p = softmax(&t).unwrap();
        let sum: f64 = p.values().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);

        logits.rotate_left(1);
        let rotated = softmax(&Tensor3::new(1, 1, logits.len(), logits).unwrap()).unwrap();
        for i in 0..p.channels() {
            let j = (i + 1) % p.channels();
            prop_assert!((p.get(0, 0, j) - rotated.get(0, 0, (j + p.channels() - 1) % p.channels())).abs() < 1e-12);
        }
    }

    // Strided correlation equals the stride-1 output subsampled.
    #[test]
    fn stride_subsamples_dense_output(
        image in plane(11, 10),
        f in (2usize..=3, 2usize..=3).prop_flat_map(|(h, w)| plane(h, w)),
        stride in 2usize..=3,
    ) {
        let bank = FilterBank::unbiased(vec![f]).unwrap();
        let dense = correlate_valid(&image, &bank, 1, false).unwrap();
        let strided = correlate_valid(&image, &bank, stride, false).unwrap();
        for r in 0..strided.height() {
            for q in 0..strided.width() {
                prop_assert_eq!(strided.get(r, q, 0), dense.get(r * stride, q * stride, 0));
            }
        }
    }

    // Range normalization lands min on 0 and max on 1 and is idempotent.
    #[test]
    fn normalize_range_bounds(x in plane(6, 7)) {
        let n = normalize_range(&x);
        let (lo, hi) = n.min_max();
        prop_assert!(lo >= 0.0 && hi <= 1.0 + 1e-15);
        let again = normalize_range(&n);
        prop_assert!(again.max_abs_diff(&n) < 1e-12);
    }

    // IDX image files survive parse -> serialize -> parse.
    #[test]
    fn idx_round_trip(
        count in 1usize..4,
        rows in 1usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        let n = count * rows * cols;
        let pixels: Vec<u8> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1)) % 256) as u8).collect();
        let imgs = RawImages { count, rows, cols, pixels };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx");
        save_idx_images(&imgs, &path).unwrap();
        let back = load_idx_images(&path).unwrap();
        prop_assert_eq!(&back, &imgs);
        let path2 = dir.path().join("imgs2.idx");
        save_idx_images(&back, &path2).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
