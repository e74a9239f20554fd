mod common;

use common::*;
use irnet_core::gradcheck::{gradcheck, GradcheckConfig, ModuleCheck};
use irnet_core::msfa::{msfa_backward, msfa_forward, MsfaBlock, DEFAULT_DILATIONS};
use irnet_core::nn::Module;
use irnet_core::Tensor;
use rand::Rng;

fn randomize(block: &mut MsfaBlock<f64>, seed: u64) {
    let mut r = rng(seed);
    block.visit_params_mut("", &mut |_, t| {
        t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    });
}

#[test]
fn forward_matches_brute_force_example() {
    let mut r = rng(1);
    let mut b = MsfaBlock::<f64>::with_defaults(4, 4, &mut r).unwrap();
    randomize(&mut b, 2);
    let x = Tensor::from_vec(&[1, 4, 16, 16], random_vec(&mut r, 1024)).unwrap();
    let y = msfa_forward(&x, &b).unwrap();
    let want = msfa_brute(x.data(), (1, 4, 16, 16), &b);
    let err = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn forward_matches_brute_force_on_random_instances() {
    let mut r = rng(3);
    for i in 0..100 {
        let cin = r.random_range(1..4);
        let mid = r.random_range(1..4);
        let cout = r.random_range(1..4);
        let h = r.random_range(1..10);
        let w = r.random_range(1..10);
        let n = r.random_range(1..3);
        let mut b = MsfaBlock::<f64>::new(cin, mid, cout, &DEFAULT_DILATIONS, &mut r).unwrap();
        randomize(&mut b, 100 + i);
        let x = Tensor::from_vec(&[n, cin, h, w], random_vec(&mut r, n * cin * h * w)).unwrap();
        let y = b.forward(&x).unwrap();
        assert_eq!(y.shape(), &[n, cout, h, w]);
        let want = msfa_brute(x.data(), (n, cin, h, w), &b);
        for (a, e) in y.data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

#[test]
fn output_is_sum_of_branches() {
    let mut r = rng(4);
    let mut b = MsfaBlock::<f64>::new(3, 2, 5, &DEFAULT_DILATIONS, &mut r).unwrap();
    randomize(&mut b, 5);
    let x = Tensor::from_vec(&[2, 3, 11, 9], random_vec(&mut r, 594)).unwrap();
    let y = b.forward(&x).unwrap();
    let mut sum = Tensor::zeros(y.shape());
    for i in 0..3 {
        sum.add_assign(&b.branch_forward(i, &x).unwrap()).unwrap();
    }
    assert!(y.max_abs_diff(&sum) < 1e-12);
}

#[test]
fn spatial_extent_is_preserved() {
    let mut r = rng(6);
    let b = MsfaBlock::<f32>::with_defaults(2, 3, &mut r).unwrap();
    for (h, w) in [(1, 1), (4, 7), (13, 5), (32, 32)] {
        let y = b.forward(&Tensor::zeros(&[1, 2, h, w])).unwrap();
        assert_eq!(y.shape(), &[1, 3, h, w]);
    }
}

#[test]
fn impulse_support_per_branch() {
    // Linearize each branch (identity activation, positive weights) to read its footprint.
    let mut r = rng(7);
    let mut b = MsfaBlock::<f64>::new(1, 1, 1, &DEFAULT_DILATIONS, &mut r).unwrap();
    for unit in b.branch_convs.iter_mut().chain(b.point_convs.iter_mut()) {
        unit.act = irnet_core::tensor::Activation::Identity;
        unit.conv.weight.data_mut().iter_mut().for_each(|v| *v = 1.0);
        unit.conv.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let size = 21;
    let mut x = Tensor::<f64>::zeros(&[1, 1, size, size]);
    x.data_mut()[10 * size + 10] = 1.0;
    for (i, d) in DEFAULT_DILATIONS.iter().enumerate() {
        let y = b.branch_forward(i, &x).unwrap();
        let nz: Vec<(usize, usize)> = (0..size * size)
            .filter(|&p| y.data()[p] != 0.0)
            .map(|p| (p / size, p % size))
            .collect();
        let rows = nz.iter().map(|p| p.0).max().unwrap() - nz.iter().map(|p| p.0).min().unwrap() + 1;
        let cols = nz.iter().map(|p| p.1).max().unwrap() - nz.iter().map(|p| p.1).min().unwrap() + 1;
        assert_eq!((rows, cols), (2 * d + 1, 2 * d + 1));
        assert_eq!(nz.len(), 9);
    }
}

#[test]
fn single_branch_gradients_equal_lone_branch() {
    let mut r = rng(8);
    let mut b = MsfaBlock::<f64>::new(2, 3, 2, &DEFAULT_DILATIONS, &mut r).unwrap();
    randomize(&mut b, 9);
    for p in &mut b.point_convs[1..] {
        p.conv.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.conv.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Tensor::from_vec(&[1, 2, 7, 7], random_vec(&mut r, 98)).unwrap();
    let g = Tensor::from_vec(&[1, 2, 7, 7], random_vec(&mut r, 98)).unwrap();
    let (dx, grads) = msfa_backward(&x, &b, &g).unwrap();

    let mut lone_b = b.branch_convs[0].clone();
    let mut lone_p = b.point_convs[0].clone();
    let (h, c1) = lone_b.forward_train(&x).unwrap();
    let (_, c2) = lone_p.forward_train(&h).unwrap();
    let dh = lone_p.backward(&c2, &g).unwrap();
    let want_dx = lone_b.backward(&c1, &dh).unwrap();
    assert!(dx.max_abs_diff(&want_dx) < 1e-12);
    let find = |name: &str| grads.iter().find(|(n, _)| n == name).unwrap().1.clone();
    assert_eq!(find("branch0.weight").data(), lone_b.conv.weight.grad().unwrap());
    assert_eq!(find("point0.weight").data(), lone_p.conv.weight.grad().unwrap());
    for name in ["branch1.weight", "branch2.bias"] {
        assert!(find(name).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn block_gradcheck_default_shape() {
    let mut r = rng(10);
    let mut b = MsfaBlock::<f64>::with_defaults(8, 8, &mut r).unwrap();
    randomize(&mut b, 11);
    let x = Tensor::from_vec(&[1, 8, 8, 8], random_vec(&mut r, 512)).unwrap();
    let mut op = ModuleCheck::new(
        b,
        vec![("input", x)],
        |m, t| m.forward(&t[0]),
        |m, t, g| {
            let (_, cache) = m.forward_train(&t[0])?;
            Ok(vec![m.backward(&cache, g)?])
        },
        12,
    )
    .unwrap();
    let rep = gradcheck("msfa", &mut op, &GradcheckConfig::default().with_max_entries(200));
    assert!(rep.passed(), "{}", rep.table());
    assert!(rep.max_rel_error() < 1e-4);
}
