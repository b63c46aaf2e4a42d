use proptest::prelude::*;

use lusnet::arch::parse_arch;
use lusnet::dataset::{apportion, SplitFractions};
use lusnet::imaging::{resize_bilinear, ImageF32};
use lusnet::kernels::{conv2d, flatten, maxpool2d, softmax, ConvParams, KernelMode, PoolParams};
use lusnet::tensor::Tensor;
use lusnet::training::Metrics;
use lusnet::weights::{decode, encode, WeightStore, WeightsError};

fn tensor(dims: Vec<usize>, lo: f32, hi: f32) -> impl Strategy<Value = Tensor> {
    let n = dims.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(dims.clone(), d).unwrap())
}

fn conv_case() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
    (1usize..10, 1usize..10, 1usize..12, 1usize..8).prop_flat_map(|(h, w, ci, co)| {
        (
            tensor(vec![h, w, ci], -1.0, 1.0),
            tensor(vec![3, 3, ci, co], -1.0, 1.0),
            tensor(vec![co], -1.0, 1.0),
        )
    })
}

fn stage() -> impl Strategy<Value = String> {
    let dims3 = (1usize..300, 1usize..300, 1usize..600);
    prop_oneof![
        (0usize..4, dims3.clone()).prop_map(|(r, (h, w, c))| format!("{}c({h}x{w}X{c})", rep(r))),
        (0usize..4, dims3).prop_map(|(r, (h, w, c))| format!("{}mp({h}x{w}x{c})", rep(r))),
        (1usize..10_000).prop_map(|n| format!("F({n})")),
        (0usize..3, 1usize..100).prop_map(|(r, n)| format!("{}Fc({n})", rep(r))),
    ]
}

fn rep(r: usize) -> String {
    match r {
        0 => String::new(),
        r => format!("{r}x"),
    }
}

fn arch_text() -> impl Strategy<Value = String> {
    (prop::collection::vec(stage(), 1..8), prop::collection::vec(0usize..3, 8)).prop_map(|(stages, gaps)| {
        let mut s = String::new();
        for (i, st) in stages.iter().enumerate() {
            if i > 0 {
                s.push_str(&" ".repeat(gaps[i % gaps.len()]));
                s.push('-');
                s.push_str(&" ".repeat(gaps[(i + 1) % gaps.len()]));
            }
            s.push_str(st);
        }
        s
    })
}

fn store() -> impl Strategy<Value = WeightStore> {
    let entry = (prop::collection::vec(1usize..5, 1..=4), "[a-z]{1,6}(/[a-z0-9_]{1,8})?")
        .prop_flat_map(|(dims, name)| (Just(name), tensor(dims, -1e6, 1e6)));
    prop::collection::vec(entry, 0..6).prop_map(|entries| {
        let mut s = WeightStore::new();
        for (name, t) in entries {
            let _ = s.insert(name, t);
        }
        s
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fast_conv_matches_reference((x, k, b) in conv_case()) {
        let p = ConvParams::same(&k, &b);
        let r = conv2d(&x, &p, KernelMode::Reference).unwrap();
        let f = conv2d(&x, &p, KernelMode::Fast).unwrap();
        prop_assert_eq!(r.dims(), &[x.dims()[0], x.dims()[1], k.dims()[3]][..]);
        for (a, b) in f.data().iter().zip(r.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn fast_pool_matches_reference(x in (2usize..12, 2usize..12, 1usize..6).prop_flat_map(|(h, w, c)| tensor(vec![h, w, c], -5.0, 5.0))) {
        let p = PoolParams::default();
        let r = maxpool2d(&x, &p, KernelMode::Reference).unwrap();
        prop_assert!(maxpool2d(&x, &p, KernelMode::Fast).unwrap().bit_eq(&r));
        prop_assert_eq!(r.dims(), &[x.dims()[0] / 2, x.dims()[1] / 2, x.dims()[2]][..]);
    }

    #[test]
    fn flatten_round_trips(x in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(h, w, c)| tensor(vec![h, w, c], -1.0, 1.0))) {
        let dims = x.dims().to_vec();
        let flat = flatten(&x).unwrap();
        prop_assert_eq!(flat.len(), x.len());
        prop_assert!(flat.reshape(dims).unwrap().bit_eq(&x));
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-80.0f32..80.0, 1..10), shift in -50.0f32..50.0) {
        let p = softmax(&Tensor::from_vec(logits.clone())).unwrap();
        let sum: f64 = p.data().iter().map(|&v| v as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let q = softmax(&Tensor::from_vec(logits.iter().map(|l| l + shift).collect())).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn resize_stays_within_input_range(
        (w, h, px) in (1usize..20, 1usize..20).prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(0.0f32..=1.0, w * h))),
        ow in 1usize..40,
        oh in 1usize..40,
    ) {
        let img = ImageF32::new(w, h, px.clone()).unwrap();
        let out = resize_bilinear(&img, ow, oh).unwrap();
        let (lo, hi) = px.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert_eq!((out.width(), out.height()), (ow, oh));
        prop_assert!(out.pixels().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }

    #[test]
    fn render_is_canonical(text in arch_text()) {
        let spec = parse_arch(&text).unwrap();
        let rendered = spec.render();
        let again = parse_arch(&rendered).unwrap();
        prop_assert_eq!(&again, &spec);
        prop_assert_eq!(again.render(), rendered);
    }

    #[test]
    fn weight_store_round_trips(s in store()) {
        let bytes = encode(&s);
        let back = decode(&bytes).unwrap();
        prop_assert!(back.bit_eq(&s));
        prop_assert_eq!(back.names().collect::<Vec<_>>(), s.names().collect::<Vec<_>>());
    }

    #[test]
    fn any_byte_flip_is_a_checksum_error(s in store(), pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut bytes = encode(&s);
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(matches!(decode(&bytes), Err(WeightsError::ChecksumMismatch { .. })), "byte {}", i);
    }

    #[test]
    fn apportion_preserves_count(n in 0usize..5000) {
        let c = apportion(n, &SplitFractions::default());
        prop_assert_eq!(c.iter().sum::<usize>(), n);
    }

    #[test]
    fn metrics_in_unit_interval(c in prop::array::uniform4(0usize..50)) {
        let m = Metrics::from_confusion([[c[0], c[1]], [c[2], c[3]]]);
        for v in [m.accuracy, m.sensitivity, m.specificity] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(m.total(), c.iter().sum::<usize>());
    }
}
