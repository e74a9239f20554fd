//! The standard matrix of backward-pass checks: every primitive at tolerance
//! 1e-4, composite blocks and a reduced-width detector at 1e-3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, FnCheck, GradcheckConfig, GradcheckReport, ModuleCheck};
use crate::detnet::{Model, ModelConfig};
use crate::dyhead::{DyHeadBlock, FeatureLevels};
use crate::error::Result;
use crate::msfa::MsfaBlock;
use crate::nn::Module;
use crate::tensor::{
    activate, activate_backward, avg_pool2x, avg_pool2x_backward, bilinear_sample, bilinear_sample_backward,
    concat_channels, conv2d_backward, conv2d_forward, global_avg_pool, global_avg_pool_backward, split_channels,
    upsample_nearest, upsample_nearest_backward, Activation, ConvParams, Tensor,
};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

/// One row of the suite: op, input shape description and its report.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub op: String,
    pub shape: String,
    pub composite: bool,
    pub report: GradcheckReport,
}

impl SuiteCase {
    /// `op shape max_rel pass`, whitespace separated.
    pub fn row(&self) -> String {
        format!(
            "{:<16} {:<28} {:>10.3e} {}",
            self.op,
            self.shape,
            self.report.max_rel_error(),
            if self.report.passed() { "pass" } else { "FAIL" }
        )
    }
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("shape matches data")
}

fn conv_case(r: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, s: usize, d: usize, h: usize, seed: u64) -> Result<FnCheck> {
    let pad = d * (k / 2);
    let x = uniform(r, &[2, cin, h, h], -1.0, 1.0);
    let w = uniform(r, &[cout, cin, k, k], -1.0, 1.0);
    let b = uniform(r, &[cout], -1.0, 1.0);
    let mk = move |t: &[Tensor<f64>]| ConvParams { weight: t[1].clone(), bias: t[2].clone(), stride: s, padding: pad, dilation: d };
    FnCheck::new(
        vec![("input", x), ("weight", w), ("bias", b)],
        move |t| conv2d_forward(&t[0], &mk(t)),
        move |t, g| {
            let gr = conv2d_backward(&t[0], &mk(t), g)?;
            Ok(vec![gr.input, gr.weight, gr.bias])
        },
        seed,
    )
}

/// Values in `[-3, 3]` at least `1e-3` away from every kink.
fn away_from(r: &mut ChaCha8Rng, n: usize, kinks: &[f64]) -> Tensor<f64> {
    let v = (0..n)
        .map(|_| loop {
            let v = r.random_range(-3.0..3.0);
            if kinks.iter().all(|k| (v - k).abs() >= 1e-3) {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(&[n], v).expect("rank-1")
}

fn flatten(levels: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let data: Vec<f64> = levels.iter().flat_map(|l| l.data().iter().copied()).collect();
    Tensor::from_vec(&[data.len()], data)
}

fn unflatten(g: &Tensor<f64>, shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f64>>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            off += n;
            Tensor::from_vec(s, g.data()[off - n..off].to_vec())
        })
        .collect()
}

/// Runs the whole matrix. Inputs and parameters are drawn from `seed`, so the
/// report is reproducible.
pub fn default_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let prim = GradcheckConfig::default().with_tolerance(PRIMITIVE_TOLERANCE).with_seed(seed);
    let comp = GradcheckConfig::default().with_tolerance(COMPOSITE_TOLERANCE).with_seed(seed);
    let mut out = Vec::new();
    let mut push = |op: &str, shape: String, composite: bool, report: GradcheckReport| {
        out.push(SuiteCase { op: op.to_string(), shape, composite, report });
    };

    for (cin, cout, k, s, d, h) in [(2, 3, 3, 1, 1, 6), (2, 2, 3, 2, 1, 7), (1, 2, 3, 1, 3, 8), (3, 1, 3, 1, 5, 6), (2, 3, 1, 1, 1, 5)] {
        let mut op = conv_case(&mut r, cin, cout, k, s, d, h, seed)?;
        let shape = format!("2x{cin}x{h}x{h} k{k} s{s} d{d}");
        push("conv2d", shape, false, gradcheck("conv2d", &mut op, &prim));
    }

    let x = uniform(&mut r, &[2, 3, 5, 6], -1.0, 1.0);
    let pts: Vec<f64> = (0..48).map(|_| r.random_range(-1..6) as f64 + r.random_range(0.05..0.95)).collect();
    let pts = Tensor::from_vec(&[2, 3, 4, 2], pts)?;
    let mut op = FnCheck::new(
        vec![("input", x), ("points", pts)],
        |t| bilinear_sample(&t[0], &t[1]),
        |t, g| {
            let gr = bilinear_sample_backward(&t[0], &t[1], g)?;
            Ok(vec![gr.input, gr.points])
        },
        seed,
    )?;
    push("bilinear_sample", "2x3x5x6, 12 points".into(), false, gradcheck("bilinear_sample", &mut op, &prim));

    for (act, kinks) in [
        (Activation::Relu, vec![0.0]),
        (Activation::Silu, vec![]),
        (Activation::Sigmoid, vec![]),
        (Activation::HardSigmoid, vec![-1.0, 1.0]),
    ] {
        let x = away_from(&mut r, 64, &kinks);
        let mut op = FnCheck::new(
            vec![("x", x)],
            move |t| Ok(activate(&t[0], act)),
            move |t, g| Ok(vec![activate_backward(&t[0], g, act)?]),
            seed,
        )?;
        let name = format!("{act:?}").to_lowercase();
        push(&name, "64".into(), false, gradcheck(&name, &mut op, &prim));
    }

    let x = uniform(&mut r, &[3, 4, 5, 7], -1.0, 1.0);
    let mut op = FnCheck::new(
        vec![("x", x)],
        |t| global_avg_pool(&t[0]),
        |t, g| Ok(vec![global_avg_pool_backward(t[0].shape(), g)?]),
        seed,
    )?;
    push("global_avg_pool", "3x4x5x7".into(), false, gradcheck("global_avg_pool", &mut op, &prim));

    let x = uniform(&mut r, &[2, 2, 4, 4], -1.0, 1.0);
    let mut op = FnCheck::new(vec![("x", x.clone())], |t| upsample_nearest(&t[0], 2), |_, g| Ok(vec![upsample_nearest_backward(g, 2)?]), seed)?;
    push("upsample_nearest", "2x2x4x4 x2".into(), false, gradcheck("upsample_nearest", &mut op, &prim));
    let mut op = FnCheck::new(vec![("x", x.clone())], |t| avg_pool2x(&t[0], 2), |_, g| Ok(vec![avg_pool2x_backward(g, 2)?]), seed)?;
    push("avg_pool", "2x2x4x4 /2".into(), false, gradcheck("avg_pool", &mut op, &prim));
    let y = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let mut op = FnCheck::new(vec![("a", x), ("b", y)], |t| concat_channels(&[&t[0], &t[1]]), |_, g| split_channels(g, &[2, 3]), seed)?;
    push("concat", "2x2x4x4 + 2x3x4x4".into(), false, gradcheck("concat", &mut op, &prim));

    let mut msfa = MsfaBlock::<f64>::with_defaults(8, 8, &mut r)?;
    msfa.visit_params_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5)));
    let x = uniform(&mut r, &[1, 8, 8, 8], -1.0, 1.0);
    let mut op = ModuleCheck::new(
        msfa,
        vec![("input", x)],
        |m, t| m.forward(&t[0]),
        |m, t, g| {
            let (_, cache) = m.forward_train(&t[0])?;
            Ok(vec![m.backward(&cache, g)?])
        },
        seed,
    )?;
    push("msfa", "1x8x8x8 rates 1/3/5".into(), true, gradcheck("msfa", &mut op, &comp.clone().with_max_entries(200)));

    let mut block = DyHeadBlock::<f64>::new(4, &mut r)?;
    block.visit_params_mut("", &mut |name, t| {
        let s = if name.starts_with("offset_conv") { 0.4 } else { 0.6 };
        t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-s..s));
    });
    let levels: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&mut r, &[2, 4, 4, 4], -1.0, 1.0)).collect();
    let shapes: Vec<Vec<usize>> = levels.iter().map(|l| l.shape().to_vec()).collect();
    let mut op = ModuleCheck::new(
        block,
        levels.iter().map(|l| ("level", l.clone())).collect(),
        |m: &DyHeadBlock<f64>, t| flatten(&m.forward(&FeatureLevels::new(t.to_vec())?)?.levels),
        move |m, t, g| {
            let (_, cache) = m.forward_train(&FeatureLevels::new(t.to_vec())?)?;
            Ok(m.backward(&cache, &FeatureLevels::new(unflatten(g, &shapes)?)?)?.levels)
        },
        seed,
    )?;
    push("dyhead_block", "2 levels 2x4x4x4".into(), true, gradcheck("dyhead_block", &mut op, &comp));

    // zero offsets sit on the bilinear lattice; move them off and open the gates
    let mut model = Model::<f64>::new(&ModelConfig::tiny(), seed)?;
    model.visit_params_mut("", &mut |name, t| {
        if name.contains("offset_conv") || name.contains("scale_fc") || name.contains("theta_fc2") {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        }
    });
    let x = uniform(&mut r, &[1, 1, 64, 64], 0.0, 1.0);
    let shapes: Vec<Vec<usize>> = model.forward(&x)?.iter().map(|t| t.shape().to_vec()).collect();
    let mut op = ModuleCheck::new(
        model,
        vec![("input", x)],
        |m: &Model<f64>, t| flatten(&m.forward(&t[0])?),
        move |m, t, g| {
            let (_, cache) = m.forward_train(&t[0])?;
            let g = unflatten(g, &shapes)?;
            Ok(vec![m.backward(&cache, &[g[0].clone(), g[1].clone()])?])
        },
        seed,
    )?;
    push("detector", "1x1x64x64 width 0.0625".into(), true, gradcheck("detector", &mut op, &comp.with_max_entries(6)));
    Ok(out)
}
