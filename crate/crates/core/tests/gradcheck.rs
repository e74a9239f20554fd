use irnet_core::gradcheck::{default_suite, gradcheck, FnCheck, GradcheckConfig, COMPOSITE_TOLERANCE, PRIMITIVE_TOLERANCE};
use irnet_core::tensor::{activate, activate_backward, conv2d_backward, conv2d_forward, Activation, ConvParams};
use irnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn default_suite_passes_and_is_deterministic() {
    let a = default_suite(0).unwrap();
    let b = default_suite(0).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.report.passed(), "{}\n{}", x.row(), x.report.table());
        assert_eq!(x.row(), y.row());
        let tol = if x.composite { COMPOSITE_TOLERANCE } else { PRIMITIVE_TOLERANCE };
        assert!(x.report.max_rel_error() <= tol);
        assert!(x.report.groups.iter().all(|g| g.checked > 0), "{}", x.report.table());
    }
    for op in ["conv2d", "bilinear_sample", "silu", "msfa", "dyhead_block", "detector"] {
        assert!(a.iter().any(|c| c.op == op), "{op} missing from the suite");
    }
    assert!(a.iter().any(|c| c.shape.contains("d3")) && a.iter().any(|c| c.shape.contains("d5")));
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn wrong_sign_backward_is_caught() {
    let x = random(&[32], 1);
    let mut op = FnCheck::new(
        vec![("x", x)],
        |t| Ok(activate(&t[0], Activation::Silu)),
        |t, g| Ok(vec![activate_backward(&t[0], g, Activation::Silu)?.map(|v| -v)]),
        3,
    )
    .unwrap();
    let rep = gradcheck("silu_negated", &mut op, &GradcheckConfig::default());
    assert!(!rep.passed());
    assert!(rep.max_rel_error() > 1.0);
}

#[test]
fn dropped_weight_gradient_is_caught() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let p = ConvParams::<f64>::kaiming(3, 2, 3, 1, 3, 3, &mut r);
    let (w0, b0) = (p.weight.clone(), p.bias.clone());
    let mk = move |t: &[Tensor<f64>]| ConvParams { weight: t[1].clone(), bias: t[2].clone(), ..p.clone() };
    let mk2 = mk.clone();
    let mut op = FnCheck::new(
        vec![("input", random(&[1, 2, 7, 7], 4)), ("weight", w0), ("bias", b0)],
        move |t| conv2d_forward(&t[0], &mk(t)),
        move |t, g| {
            let gr = conv2d_backward(&t[0], &mk2(t), g)?;
            // the last weight entry's gradient is zeroed
            let mut w = gr.weight;
            let n = w.len();
            w.data_mut()[n - 1] = 0.0;
            Ok(vec![gr.input, w, gr.bias])
        },
        5,
    )
    .unwrap();
    let rep = gradcheck("conv_dropped", &mut op, &GradcheckConfig::default());
    assert!(!rep.passed());
    let failing: Vec<&str> = rep
        .groups
        .iter()
        .filter(|g| g.max_rel_error > PRIMITIVE_TOLERANCE)
        .map(|g| g.name.as_str())
        .collect();
    assert_eq!(failing, vec!["weight"], "{}", rep.table());
}
