mod common;

use proptest::prelude::*;

use tdcleak_core::metrics::{ccr, ccr_norm, jaccard, mssim, similarity, MetricError, DEFAULT_WINDOW};

fn nonconstant(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..255.0, n).prop_filter("constant", |v| v.iter().any(|x| (x - v[0]).abs() > 1e-3))
}

fn pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (nonconstant(n), nonconstant(n))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn ccr_matches_oracle((a, b) in pair(200)) {
        prop_assert!(close(ccr(&a, &b).unwrap(), common::ccr(&a, &b), 1e-10));
    }

    #[test]
    fn ccr_norm_matches_oracle_and_is_bounded((a, b) in pair(200)) {
        let r = ccr_norm(&a, &b).unwrap();
        prop_assert!(close(r, common::ccr_norm(&a, &b), 1e-10));
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn ccr_norm_is_symmetric((a, b) in pair(100)) {
        prop_assert!(close(ccr_norm(&a, &b).unwrap(), ccr_norm(&b, &a).unwrap(), 1e-12));
    }

    #[test]
    fn ccr_norm_is_affine_invariant((a, b) in pair(100), scale in 0.1f64..10.0, shift in -100.0f64..100.0) {
        let moved: Vec<f64> = a.iter().map(|x| x * scale + shift).collect();
        prop_assert!(close(ccr_norm(&a, &b).unwrap(), ccr_norm(&moved, &b).unwrap(), 1e-9));
        let flipped: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!(close(ccr_norm(&a, &b).unwrap(), -ccr_norm(&flipped, &b).unwrap(), 1e-9));
    }

    #[test]
    fn self_similarity_is_one(a in nonconstant(28 * 28)) {
        prop_assert!(close(ccr_norm(&a, &a).unwrap(), 1.0, 1e-12));
        prop_assert!(close(mssim(&a, &a, 28, 28, DEFAULT_WINDOW).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn mssim_matches_oracle_and_is_bounded(
        (w, h, win) in (3usize..16, 3usize..16, prop_oneof![Just(1usize), Just(3), Just(5)]),
        seed in any::<u64>(),
    ) {
        let gen = |s: u64| -> Vec<f64> {
            let mut x = s | 1;
            (0..w * h).map(|_| { x ^= x << 13; x ^= x >> 7; x ^= x << 17; (x % 256) as f64 }).collect()
        };
        let (a, b) = (gen(seed), gen(seed.wrapping_mul(31).wrapping_add(7)));
        let win = if win > w.min(h) { 3 } else { win };
        let got = mssim(&a, &b, w, h, win).unwrap();
        prop_assert!(close(got, common::mssim(&a, &b, w, h, win), 1e-9));
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&got));
        prop_assert!(close(got, mssim(&b, &a, w, h, win).unwrap(), 1e-12));
    }

    #[test]
    fn jaccard_bounds_and_symmetry(
        (a, b) in (1usize..200).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)))
    ) {
        let j = jaccard(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
    }
}

#[test]
fn constant_image_is_an_error() {
    let a = vec![3.0; 784];
    let b: Vec<f64> = (0..784).map(|i| i as f64).collect();
    assert_eq!(ccr_norm(&a, &b), Err(MetricError::ConstantImage));
    assert_eq!(ccr_norm(&b, &a), Err(MetricError::ConstantImage));
    assert_eq!(ccr(&a, &b).unwrap(), 0.0);
}

#[test]
fn dimension_and_window_errors() {
    let a = vec![1.0, 2.0, 3.0];
    assert_eq!(ccr(&a, &a[..2]), Err(MetricError::DimensionMismatch(3, 2)));
    assert!(ccr(&[], &[]).is_err());
    let img: Vec<f64> = (0..100).map(|i| i as f64).collect();
    assert_eq!(mssim(&img, &img, 10, 10, 4), Err(MetricError::InvalidWindow(4)));
    assert_eq!(mssim(&img, &img, 10, 10, 0), Err(MetricError::InvalidWindow(0)));
    assert!(matches!(mssim(&img, &img, 10, 10, 11), Err(MetricError::WindowTooLarge { .. })));
    assert!(mssim(&img, &img, 9, 10, 3).is_err());
}

#[test]
fn inverted_image_correlates_negatively() {
    let a: Vec<f64> = (0..784).map(|i| ((i * 37) % 256) as f64).collect();
    let b: Vec<f64> = a.iter().map(|x| 255.0 - x).collect();
    assert!((ccr_norm(&a, &b).unwrap() + 1.0).abs() < 1e-12);
    assert!(mssim(&a, &b, 28, 28, DEFAULT_WINDOW).unwrap() < 0.5);
}

#[test]
fn jaccard_of_empty_masks_is_one() {
    assert_eq!(jaccard(&[false; 4], &[false; 4]), 1.0);
    assert_eq!(jaccard(&[true, false], &[false, true]), 0.0);
    assert_eq!(jaccard(&[true, true, false], &[true, false, false]), 0.5);
}

#[test]
fn similarity_report_uses_default_window() {
    let a: Vec<f64> = (0..784).map(|i| ((i * 13) % 256) as f64).collect();
    let r = similarity(&a, &a, 28, 28).unwrap();
    assert_eq!(r.window, DEFAULT_WINDOW);
    assert!((r.ccr_norm - 1.0).abs() < 1e-12 && (r.mssim - 1.0).abs() < 1e-12);
}
