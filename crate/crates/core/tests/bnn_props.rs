mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tdcleak_core::bnn::{
    batch_norm, conv2d_binary_layer, conv2d_first_layer, fully_connected, max_pool_2x2, sign_nonlinearity,
    BatchNorm, BinaryKernel3x3, BinaryMatrix, BnnModel, FeatureMap, ValueKind,
};
use tdcleak_core::dataset::{Image, PIXELS, SIDE};

fn kernel() -> impl Strategy<Value = [i8; 9]> {
    prop::array::uniform9(prop_oneof![Just(-1i8), Just(1i8)])
}

fn image() -> impl Strategy<Value = Image> {
    prop::collection::vec(any::<u8>(), PIXELS).prop_map(|v| Image::from_slice(&v).unwrap())
}

fn signs(n: usize) -> impl Strategy<Value = Vec<i32>> {
    prop::collection::vec(prop_oneof![Just(-1i32), Just(1i32)], n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn first_layer_matches_oracle(img in image(), k in kernel()) {
        let got: Vec<i64> = conv2d_first_layer(&img, &BinaryKernel3x3::new(k).unwrap()).into_iter().map(i64::from).collect();
        prop_assert_eq!(got, common::conv_first(&img.pixels, SIDE, &k));
    }

    #[test]
    fn negated_kernel_negates_output(img in image(), k in kernel()) {
        let k = BinaryKernel3x3::new(k).unwrap();
        let a = conv2d_first_layer(&img, &k);
        let b = conv2d_first_layer(&img, &k.negated());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn binary_layer_matches_oracle(
        (h, w, c, out, data, ks) in (1usize..7, 1usize..7, 1usize..5, 1usize..5).prop_flat_map(|(h, w, c, out)| {
            (Just(h), Just(w), Just(c), Just(out), signs(h * w * c), prop::collection::vec(kernel(), out * c))
        })
    ) {
        let kernels: Vec<BinaryKernel3x3> = ks.iter().map(|k| BinaryKernel3x3::new(*k).unwrap()).collect();
        let map = FeatureMap::new(h, w, c, data.clone(), ValueKind::Binary).unwrap();
        let got: Vec<i64> = conv2d_binary_layer(&map, &kernels, out).unwrap().data.into_iter().map(i64::from).collect();
        prop_assert_eq!(got, common::conv_binary(&data, h, w, c, &ks, out));
    }

    #[test]
    fn max_pool_matches_oracle(
        (h, w, c, data) in (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(h, w, c)| {
            (Just(2 * h), Just(2 * w), Just(c), prop::collection::vec(-10_000i32..10_000, 4 * h * w * c))
        })
    ) {
        let got = max_pool_2x2(&FeatureMap::new(h, w, c, data.clone(), ValueKind::Integer).unwrap()).unwrap();
        prop_assert_eq!((got.h, got.w, got.c), (h / 2, w / 2, c));
        prop_assert_eq!(got.data, common::max_pool(&data, h, w, c));
    }

    #[test]
    fn batch_norm_matches_exact_rational(
        fixed in any::<bool>(),
        (c, data, scale, shift) in (1usize..5).prop_flat_map(|c| {
            (
                Just(c),
                prop::collection::vec(-20_000i32..20_000, c..8 * c),
                prop::collection::vec(-(1i32 << 18)..(1 << 18), c),
                prop::collection::vec(-(1i32 << 20)..(1 << 20), c),
            )
        })
    ) {
        let n = data.len() / c;
        let data = data[..n * c].to_vec();
        let (kind, frac) = if fixed { (ValueKind::FixedQ8, 8) } else { (ValueKind::Integer, 0) };
        let bn = BatchNorm { scale: scale.clone(), shift: shift.clone() };
        let got = batch_norm(&FeatureMap::new(1, n, c, data.clone(), kind).unwrap(), &bn).unwrap();
        prop_assert_eq!(got.kind, ValueKind::FixedQ8);
        for (i, (&g, &x)) in got.data.iter().zip(&data).enumerate() {
            prop_assert_eq!(g, common::batch_norm(x, frac, scale[i % c], shift[i % c]));
            prop_assert!((-256..=256).contains(&g));
        }
    }

    #[test]
    fn sign_is_plus_one_at_zero_and_above(data in prop::collection::vec(-500i32..500, 1..300)) {
        let n = data.len();
        let got = sign_nonlinearity(&FeatureMap::new(1, 1, n, data.clone(), ValueKind::FixedQ8).unwrap());
        prop_assert_eq!(got.kind, ValueKind::Binary);
        prop_assert_eq!(got.data, data.iter().map(|&v| common::sign(v)).collect::<Vec<_>>());
    }

    #[test]
    fn fully_connected_matches_oracle(
        (rows, x, w) in (1usize..30, 1usize..300).prop_flat_map(|(rows, cols)| {
            (Just(rows), signs(cols), prop::collection::vec(prop_oneof![Just(-1i8), Just(1i8)], rows * cols))
        })
    ) {
        let m = BinaryMatrix::new(rows, x.len(), w.clone()).unwrap();
        let got: Vec<i64> = fully_connected(&x, &m).unwrap().into_iter().map(i64::from).collect();
        prop_assert_eq!(got, common::fully_connected(&x, rows, &w));
    }
}

#[test]
fn kernel_rejects_non_binary_weights() {
    assert!(BinaryKernel3x3::new([1, -1, 1, 1, 0, 1, 1, 1, 1]).is_err());
    assert!(BinaryKernel3x3::new([2, -1, 1, 1, 1, 1, 1, 1, 1]).is_err());
}

#[test]
fn mismatched_shapes_are_errors() {
    let k = BinaryKernel3x3::all(1);
    let map = FeatureMap::filled(4, 4, 2, 1, ValueKind::Binary);
    assert!(conv2d_binary_layer(&map, &[k; 3], 2).is_err());
    assert!(max_pool_2x2(&FeatureMap::filled(3, 4, 1, 0, ValueKind::Integer)).is_err());
    let m = BinaryMatrix::new(2, 3, vec![1; 6]).unwrap();
    assert!(fully_connected(&[1, 1], &m).is_err());
    assert!(BinaryMatrix::new(2, 3, vec![1; 5]).is_err());
}

#[test]
fn all_ones_kernel_on_constant_image() {
    let img = Image::new([1; PIXELS]);
    let out = conv2d_first_layer(&img, &BinaryKernel3x3::all(1));
    assert_eq!(out[0], 4);
    assert_eq!(out[1], 6);
    assert_eq!(out[SIDE + 1], 9);
}

#[test]
fn model_roundtrips_and_detects_tampering() {
    let model = BnnModel::random(11);
    let bytes = model.to_bytes();
    let back = BnnModel::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let mut bad = bytes.clone();
        let i = rand::Rng::gen_range(&mut rng, 0..bad.len());
        bad[i] ^= 0x01;
        assert!(BnnModel::from_bytes(&bad).is_err(), "flip at byte {i} accepted");
    }
    assert!(BnnModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn inference_is_deterministic_and_produces_ten_scores() {
    let model = BnnModel::random(5);
    let img = Image::new(std::array::from_fn(|i| (i * 7 % 256) as u8));
    let a = model.infer(&img).unwrap();
    let b = model.infer(&img).unwrap();
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.scores.len(), 10);
    assert!(a.class < 10);
}
