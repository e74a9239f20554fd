mod common;

use common::*;
use irnet_core::gradcheck::{gradcheck, FnCheck, GradcheckConfig};
use irnet_core::tensor::*;
use irnet_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn t(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, random_vec(rng, len)).unwrap()
}

fn conv(cout: usize, cin: usize, k: usize, s: usize, p: usize, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> ConvParams<f64> {
    ConvParams {
        weight: t(&[cout, cin, k, k], rng),
        bias: t(&[cout], rng),
        stride: s,
        padding: p,
        dilation: d,
    }
}

#[test]
fn dilated_conv_matches_brute_force_example() {
    let mut r = rng(11);
    let x = t(&[1, 2, 8, 8], &mut r);
    let p = conv(3, 2, 3, 1, 3, 3, &mut r);
    let y = conv2d_forward(&x, &p).unwrap();
    let (want, ho, wo) = conv_brute(x.data(), (1, 2, 8, 8), p.weight.data(), p.bias.data(), (3, 3, 3), 1, 3, 3);
    assert_eq!(y.shape(), &[1, 3, ho, wo]);
    let err = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "max error {err}");
}

#[test]
fn conv_matches_brute_force_on_random_geometries() {
    let mut r = rng(12);
    for _ in 0..100 {
        let n = r.random_range(1..3);
        let cin = r.random_range(1..4);
        let cout = r.random_range(1..4);
        let k = [1, 3][r.random_range(0..2)];
        let s = r.random_range(1..3);
        let d = r.random_range(1..4);
        let p = r.random_range(0..4);
        let h = r.random_range(1..12);
        let w = r.random_range(1..12);
        let x = t(&[n, cin, h, w], &mut r);
        let cp = conv(cout, cin, k, s, p, d, &mut r);
        if cp.output_hw(h, w).is_none() {
            assert!(conv2d_forward(&x, &cp).is_err());
            continue;
        }
        let y = conv2d_forward(&x, &cp).unwrap();
        let (want, ho, wo) = conv_brute(x.data(), (n, cin, h, w), cp.weight.data(), cp.bias.data(), (cout, k, k), s, p, d);
        assert_eq!(y.shape(), &[n, cout, ho, wo]);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_is_linear_without_bias() {
    let mut r = rng(13);
    let mut p = conv(3, 2, 3, 1, 2, 2, &mut r);
    p.bias = Tensor::zeros(&[3]);
    let a = t(&[2, 2, 9, 7], &mut r);
    let b = t(&[2, 2, 9, 7], &mut r);
    let (ka, kb) = (0.7, -1.9);
    let mix = a.zip_map(&b, |u, v| ka * u + kb * v).unwrap();
    let lhs = conv2d_forward(&mix, &p).unwrap();
    let rhs = conv2d_forward(&a, &p)
        .unwrap()
        .zip_map(&conv2d_forward(&b, &p).unwrap(), |u, v| ka * u + kb * v)
        .unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-10);
}

#[test]
fn dilated_impulse_response_width() {
    // k = 3, d = 5: effective receptive field d(k-1)+1 = 11
    let mut p = ConvParams::<f64>::zeros(1, 1, 3, 1, 5, 5);
    p.weight.data_mut().iter_mut().for_each(|v| *v = 1.0);
    let mut x = Tensor::<f64>::zeros(&[1, 1, 21, 21]);
    x.data_mut()[10 * 21 + 10] = 1.0;
    let y = conv2d_forward(&x, &p).unwrap();
    let cols: Vec<usize> = (0..21).filter(|&c| (0..21).any(|r| y.data()[r * 21 + c] != 0.0)).collect();
    assert_eq!(cols.last().unwrap() - cols.first().unwrap() + 1, 11);
    let support = y.data().iter().filter(|&&v| v != 0.0).count();
    assert_eq!(support, 9);
}

#[test]
fn forward_ops_are_bit_reproducible() {
    let mut r = rng(14);
    let x = t(&[2, 3, 10, 10], &mut r);
    let p = conv(4, 3, 3, 2, 1, 1, &mut r);
    assert_eq!(conv2d_forward(&x, &p).unwrap(), conv2d_forward(&x, &p).unwrap());
    let pts = t(&[2, 4, 4, 2], &mut r).map(|v| 4.5 + 5.0 * v);
    assert_eq!(bilinear_sample(&x, &pts).unwrap(), bilinear_sample(&x, &pts).unwrap());
}

fn conv_check(p: ConvParams<f64>, x: Tensor<f64>, seed: u64) -> FnCheck {
    let (s, pad, d) = (p.stride, p.padding, p.dilation);
    let mk = move |t: &[Tensor<f64>]| ConvParams {
        weight: t[1].clone(),
        bias: t[2].clone(),
        stride: s,
        padding: pad,
        dilation: d,
    };
    FnCheck::new(
        vec![("input", x), ("weight", p.weight.clone()), ("bias", p.bias.clone())],
        move |t| conv2d_forward(&t[0], &mk(t)),
        move |t, g| {
            let gr = conv2d_backward(&t[0], &mk(t), g)?;
            Ok(vec![gr.input, gr.weight, gr.bias])
        },
        seed,
    )
    .unwrap()
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut r = rng(15);
    for (i, (cin, cout, k, s, p, d, h)) in [
        (2, 3, 3, 1, 1, 1, 6),
        (2, 2, 3, 2, 1, 1, 7),
        (1, 2, 3, 1, 3, 3, 8),
        (3, 1, 3, 1, 5, 5, 6),
        (2, 3, 1, 1, 0, 1, 5),
    ]
    .into_iter()
    .enumerate()
    {
        let x = t(&[2, cin, h, h], &mut r);
        let cp = conv(cout, cin, k, s, p, d, &mut r);
        let rep = gradcheck("conv2d", &mut conv_check(cp, x, i as u64), &GradcheckConfig::default());
        assert!(rep.passed(), "{}", rep.table());
    }
}

#[test]
fn pointwise_conv_gradcheck_is_near_exact() {
    let mut r = rng(16);
    let x = t(&[1, 3, 4, 4], &mut r);
    let cp = conv(2, 3, 1, 1, 0, 1, &mut r);
    let rep = gradcheck("conv1x1", &mut conv_check(cp, x, 3), &GradcheckConfig::default().with_tolerance(1e-8));
    assert!(rep.passed(), "{}", rep.table());
}

#[test]
fn bilinear_matches_hand_interpolation_and_gradients() {
    let mut r = rng(17);
    let x = t(&[2, 3, 5, 6], &mut r);
    // keep points away from the integer lattice
    let pts = Tensor::from_vec(
        &[2, 3, 4, 2],
        (0..48)
            .map(|_| {
                let base = r.random_range(-1..6) as f64;
                base + r.random_range(0.05..0.95)
            })
            .collect(),
    )
    .unwrap();
    let y = bilinear_sample(&x, &pts).unwrap();
    for b in 0..2 {
        for c in 0..3 {
            for p in 0..12 {
                let py = pts.data()[(b * 12 + p) * 2];
                let px = pts.data()[(b * 12 + p) * 2 + 1];
                let plane = &x.data()[(b * 3 + c) * 30..(b * 3 + c + 1) * 30];
                let want = bilinear_brute(plane, 5, 6, py, px);
                assert!((y.data()[(b * 3 + c) * 12 + p] - want).abs() < 1e-12);
            }
        }
    }
    let mut op = FnCheck::new(
        vec![("input", x), ("points", pts)],
        |t| bilinear_sample(&t[0], &t[1]),
        |t, g| {
            let gr = bilinear_sample_backward(&t[0], &t[1], g)?;
            Ok(vec![gr.input, gr.points])
        },
        5,
    )
    .unwrap();
    let rep = gradcheck("bilinear_sample", &mut op, &GradcheckConfig::default());
    assert!(rep.passed(), "{}", rep.table());
    assert!(rep.groups.iter().all(|g| g.kink_skipped == 0));
}

fn away_from_kinks(rng: &mut rand_chacha::ChaCha8Rng, len: usize, kinks: &[f64]) -> Vec<f64> {
    (0..len)
        .map(|_| loop {
            let v = rng.random_range(-3.0..3.0);
            if kinks.iter().all(|k| (v - k).abs() >= 1e-3) {
                break v;
            }
        })
        .collect()
}

#[test]
fn activation_backwards_match_finite_differences() {
    let mut r = rng(18);
    for (act, kinks) in [
        (Activation::Relu, vec![0.0]),
        (Activation::Silu, vec![]),
        (Activation::Sigmoid, vec![]),
        (Activation::HardSigmoid, vec![-1.0, 1.0]),
    ] {
        let x = Tensor::from_vec(&[64], away_from_kinks(&mut r, 64, &kinks)).unwrap();
        let mut op = FnCheck::new(
            vec![("x", x)],
            move |t| Ok(activate(&t[0], act)),
            move |t, g| Ok(vec![activate_backward(&t[0], g, act)?]),
            7,
        )
        .unwrap();
        let rep = gradcheck(&format!("{act:?}"), &mut op, &GradcheckConfig::default());
        assert!(rep.passed(), "{}", rep.table());
        assert_eq!(rep.groups[0].kink_skipped, 0);
    }
}

#[test]
fn global_pool_matches_direct_sum() {
    let mut r = rng(19);
    let x = t(&[3, 4, 5, 7], &mut r);
    let y = global_avg_pool(&x).unwrap();
    for i in 0..12 {
        let s: f64 = x.data()[i * 35..(i + 1) * 35].iter().sum();
        assert!((y.data()[i] - s / 35.0).abs() < 1e-12);
    }
    let mut op = FnCheck::new(
        vec![("x", x)],
        |t| global_avg_pool(&t[0]),
        |t, g| Ok(vec![global_avg_pool_backward(t[0].shape(), g)?]),
        1,
    )
    .unwrap();
    assert!(gradcheck("gap", &mut op, &GradcheckConfig::default()).passed());
}

#[test]
fn resampling_and_concat_backwards() {
    let mut r = rng(20);
    let x = t(&[2, 2, 4, 4], &mut r);
    let mut up = FnCheck::new(
        vec![("x", x.clone())],
        |t| upsample_nearest(&t[0], 2),
        |_, g| Ok(vec![upsample_nearest_backward(g, 2)?]),
        1,
    )
    .unwrap();
    assert!(gradcheck("upsample", &mut up, &GradcheckConfig::default()).passed());
    let mut pool = FnCheck::new(
        vec![("x", x.clone())],
        |t| avg_pool2x(&t[0], 2),
        |_, g| Ok(vec![avg_pool2x_backward(g, 2)?]),
        2,
    )
    .unwrap();
    assert!(gradcheck("avgpool", &mut pool, &GradcheckConfig::default()).passed());
    let y = t(&[2, 3, 4, 4], &mut r);
    let mut cat = FnCheck::new(
        vec![("a", x), ("b", y)],
        |t| concat_channels(&[&t[0], &t[1]]),
        |_, g| split_channels(g, &[2, 3]),
        3,
    )
    .unwrap();
    assert!(gradcheck("concat", &mut cat, &GradcheckConfig::default()).passed());
}

proptest! {
    #[test]
    fn hard_sigmoid_range_and_monotone(a in -1e6f64..1e6, b in -1e6f64..1e6) {
        let x = Tensor::from_vec(&[2], vec![a.min(b), a.max(b)]).unwrap();
        let y = hard_sigmoid(&x);
        prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(y.data()[0] <= y.data()[1]);
    }

    #[test]
    fn conv_superposition(seed in 0u64..1000, ka in -2.0f64..2.0, kb in -2.0f64..2.0) {
        let mut r = rng(seed);
        let mut p = conv(2, 2, 3, 1, 1, 2, &mut r);
        p.bias = Tensor::zeros(&[2]);
        let a = t(&[1, 2, 6, 6], &mut r);
        let b = t(&[1, 2, 6, 6], &mut r);
        let lhs = conv2d_forward(&a.zip_map(&b, |u, v| ka * u + kb * v).unwrap(), &p).unwrap();
        let rhs = conv2d_forward(&a, &p).unwrap().zip_map(&conv2d_forward(&b, &p).unwrap(), |u, v| ka * u + kb * v).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }
}
