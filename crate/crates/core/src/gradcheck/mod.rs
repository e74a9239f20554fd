//! Central finite-difference verification of hand-written backward passes.
//!
//! An op under test is exposed through [`Differentiable`]: a set of named
//! parameter groups (inputs and weights), a scalar loss and its analytic
//! gradient. The scalar loss of a tensor-valued op is the inner product of
//! the output with a fixed random projection, so every output element
//! contributes.
//!
//! Entry error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
//! with `floor = floor_fraction * max |analytic|` over the group. Entries that
//! miss at the base step are retried with Richardson estimates at 100x and
//! 1000x wider steps, which separates rounding noise on tiny gradients from real
//! disagreement. An entry whose
//! stencil straddles a kink (ReLU, max, clamp, lattice crossings of bilinear
//! sampling) is detected by re-differencing with a 100x smaller step: if the
//! fine stencil agrees with the analytic value the entry is counted as
//! kink-skipped, otherwise it stays a failure.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error of every group.
    pub tolerance: f64,
    /// Error denominator floor as a fraction of the group's largest gradient.
    pub floor_fraction: f64,
    /// Check at most this many randomly chosen entries per group.
    pub max_entries_per_group: Option<usize>,
    /// Fail if more than this fraction of checked entries were kink-skipped.
    pub max_skip_fraction: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor_fraction: 1e-3,
            max_entries_per_group: None,
            max_skip_fraction: 0.2,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_entries(mut self, n: usize) -> Self {
        self.max_entries_per_group = Some(n);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A double-precision computation with analytic gradients to verify.
pub trait Differentiable {
    fn group_names(&self) -> Vec<String>;
    fn group_len(&self, group: usize) -> usize;
    fn get(&self, group: usize, index: usize) -> f64;
    fn set(&mut self, group: usize, index: usize, value: f64);
    fn loss(&self) -> Result<f64>;
    /// Analytic gradient of [`Differentiable::loss`] for every group.
    fn gradients(&self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    pub checked: usize,
    pub kink_skipped: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub op: String,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
    /// Set when a loss or gradient evaluation produced a non-finite value.
    pub failure: Option<String>,
    max_skip_fraction: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none()
            && self.groups.iter().all(|g| {
                g.max_rel_error < self.tolerance
                    && (g.kink_skipped as f64) <= self.max_skip_fraction * g.checked.max(1) as f64
            })
    }

    /// One line per group: `op group entries checked skipped max_rel pass`.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!(
                "{:<28} {:<36} {:>7} {:>7} {:>5} {:>10.3e} {}\n",
                self.op,
                g.name,
                g.entries,
                g.checked,
                g.kink_skipped,
                g.max_rel_error,
                if g.max_rel_error < self.tolerance { "pass" } else { "FAIL" }
            ));
        }
        if let Some(f) = &self.failure {
            s.push_str(&format!("{:<28} failure: {f}\n", self.op));
        }
        s
    }
}

fn finite(v: f64, what: impl FnOnce() -> String) -> std::result::Result<f64, String> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(what())
    }
}

fn central<D: Differentiable + ?Sized>(
    op: &mut D,
    g: usize,
    i: usize,
    h: f64,
) -> std::result::Result<(f64, f64, f64), String> {
    let x0 = op.get(g, i);
    let at = |op: &mut D, v: f64| -> std::result::Result<f64, String> {
        op.set(g, i, v);
        let l = op.loss().map_err(|e| e.to_string())?;
        finite(l, || format!("loss non-finite at group {g} entry {i}"))
    };
    let plus = at(op, x0 + h)?;
    let minus = at(op, x0 - h)?;
    let center = at(op, x0)?;
    op.set(g, i, x0);
    Ok(((plus - minus) / (2.0 * h), (plus - center) / h, (center - minus) / h))
}

/// Runs the finite-difference check over every group of `op`.
pub fn gradcheck<D: Differentiable + ?Sized>(
    name: &str,
    op: &mut D,
    config: &GradcheckConfig,
) -> GradcheckReport {
    let mut report = GradcheckReport {
        op: name.to_string(),
        tolerance: config.tolerance,
        groups: Vec::new(),
        failure: None,
        max_skip_fraction: config.max_skip_fraction,
    };
    let analytic = match op.gradients() {
        Ok(g) => g,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for (g, gname) in op.group_names().into_iter().enumerate() {
        let len = op.group_len(g);
        let grads = &analytic[g];
        if let Some(i) = grads.iter().position(|v| !v.is_finite()) {
            report.failure = Some(format!("analytic gradient non-finite at {gname}[{i}]"));
            return report;
        }
        let scale = grads.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let floor = (config.floor_fraction * scale).max(1e-12);
        let indices: Vec<usize> = match config.max_entries_per_group {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut gr = GroupReport {
            name: gname.clone(),
            entries: len,
            checked: 0,
            kink_skipped: 0,
            max_rel_error: 0.0,
            worst_index: None,
        };
        for i in indices {
            let a = grads[i];
            let rel = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
            let (n, _, _) = match central(op, g, i, config.step) {
                Ok(v) => v,
                Err(e) => {
                    report.failure = Some(format!("{gname}: {e}"));
                    report.groups.push(gr);
                    return report;
                }
            };
            gr.checked += 1;
            let mut err = rel(n);
            if err >= config.tolerance {
                // Tiny entries drown in rounding noise at the base step; a
                // Richardson estimate at a wider step resolves them.
                for wide in [100.0 * config.step, 1000.0 * config.step] {
                    if err < config.tolerance {
                        break;
                    }
                    if let (Ok((d1, _, _)), Ok((d2, _, _))) =
                        (central(op, g, i, wide), central(op, g, i, wide / 2.0))
                    {
                        err = err.min(rel((4.0 * d2 - d1) / 3.0));
                    }
                }
            }
            if err >= config.tolerance {
                if let Ok((fine, fwd, bwd)) = central(op, g, i, config.step / 100.0) {
                    if rel(fine) < config.tolerance
                        || rel(fwd) < config.tolerance
                        || rel(bwd) < config.tolerance
                    {
                        gr.kink_skipped += 1;
                        err = 0.0;
                    }
                }
            }
            if err > gr.max_rel_error {
                gr.max_rel_error = err;
                gr.worst_index = Some(i);
            }
        }
        report.groups.push(gr);
    }
    report
}

/// Uniform `[-1, 1]` projection weights used to scalarize tensor outputs.
pub fn projection(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn project(y: &Tensor<f64>, r: &[f64]) -> Result<f64> {
    if y.len() != r.len() {
        return Err(Error::invalid(
            "gradcheck",
            format!("output length changed from {} to {}", r.len(), y.len()),
        ));
    }
    Ok(y.data().iter().zip(r).map(|(a, b)| a * b).sum())
}

type Forward = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;
type Backward = Box<dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>>;

/// Checks a pure function of several tensors (inputs and weights alike).
pub struct FnCheck {
    names: Vec<String>,
    tensors: Vec<Tensor<f64>>,
    forward: Forward,
    backward: Backward,
    proj: Vec<f64>,
    proj_shape: Vec<usize>,
}

impl FnCheck {
    pub fn new(
        named: Vec<(&str, Tensor<f64>)>,
        forward: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'static,
        backward: impl Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>> + 'static,
        seed: u64,
    ) -> Result<Self> {
        let (names, tensors): (Vec<_>, Vec<_>) =
            named.into_iter().map(|(n, t)| (n.to_string(), t)).unzip();
        let y = forward(&tensors)?;
        Ok(FnCheck {
            names,
            tensors,
            forward: Box::new(forward),
            backward: Box::new(backward),
            proj: projection(y.len(), seed),
            proj_shape: y.shape().to_vec(),
        })
    }
}

impl Differentiable for FnCheck {
    fn group_names(&self) -> Vec<String> {
        self.names.clone()
    }
    fn group_len(&self, g: usize) -> usize {
        self.tensors[g].len()
    }
    fn get(&self, g: usize, i: usize) -> f64 {
        self.tensors[g].data()[i]
    }
    fn set(&mut self, g: usize, i: usize, v: f64) {
        self.tensors[g].data_mut()[i] = v;
    }
    fn loss(&self) -> Result<f64> {
        project(&(self.forward)(&self.tensors)?, &self.proj)
    }
    fn gradients(&self) -> Result<Vec<Vec<f64>>> {
        let r = Tensor::from_vec(&self.proj_shape, self.proj.clone())?;
        let grads = (self.backward)(&self.tensors, &r)?;
        Ok(grads.into_iter().map(Tensor::into_data).collect())
    }
}

type ModForward<M> = Box<dyn Fn(&M, &[Tensor<f64>]) -> Result<Tensor<f64>>>;
type ModBackward<M> = Box<dyn Fn(&mut M, &[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>>;

/// Checks a parameterized module: groups are the given inputs followed by every
/// parameter tensor in visitation order. The backward closure returns input
/// gradients and accumulates parameter gradients into the module's slots.
pub struct ModuleCheck<M> {
    module: M,
    input_names: Vec<String>,
    inputs: Vec<Tensor<f64>>,
    param_names: Vec<String>,
    forward: ModForward<M>,
    backward: ModBackward<M>,
    proj: Vec<f64>,
    proj_shape: Vec<usize>,
}

impl<M: Module<f64> + Clone> ModuleCheck<M> {
    pub fn new(
        module: M,
        inputs: Vec<(&str, Tensor<f64>)>,
        forward: impl Fn(&M, &[Tensor<f64>]) -> Result<Tensor<f64>> + 'static,
        backward: impl Fn(&mut M, &[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>> + 'static,
        seed: u64,
    ) -> Result<Self> {
        let (input_names, inputs): (Vec<_>, Vec<_>) =
            inputs.into_iter().map(|(n, t)| (n.to_string(), t)).unzip();
        let y = forward(&module, &inputs)?;
        Ok(ModuleCheck {
            param_names: module.param_names(),
            module,
            input_names,
            inputs,
            forward: Box::new(forward),
            backward: Box::new(backward),
            proj: projection(y.len(), seed),
            proj_shape: y.shape().to_vec(),
        })
    }

    pub fn module(&self) -> &M {
        &self.module
    }

    fn with_param<R>(&self, g: usize, f: impl FnOnce(&Tensor<f64>) -> R) -> R {
        let target = &self.param_names[g];
        let mut f = Some(f);
        let mut out = None;
        self.module.visit_params("", &mut |name, t| {
            if name == target {
                if let Some(f) = f.take() {
                    out = Some(f(t));
                }
            }
        });
        out.expect("parameter group exists")
    }
}

impl<M: Module<f64> + Clone> Differentiable for ModuleCheck<M> {
    fn group_names(&self) -> Vec<String> {
        self.input_names
            .iter()
            .chain(&self.param_names)
            .cloned()
            .collect()
    }
    fn group_len(&self, g: usize) -> usize {
        match g.checked_sub(self.inputs.len()) {
            None => self.inputs[g].len(),
            Some(p) => self.with_param(p, |t| t.len()),
        }
    }
    fn get(&self, g: usize, i: usize) -> f64 {
        match g.checked_sub(self.inputs.len()) {
            None => self.inputs[g].data()[i],
            Some(p) => self.with_param(p, |t| t.data()[i]),
        }
    }
    fn set(&mut self, g: usize, i: usize, v: f64) {
        match g.checked_sub(self.inputs.len()) {
            None => self.inputs[g].data_mut()[i] = v,
            Some(p) => {
                let target = self.param_names[p].clone();
                self.module.visit_params_mut("", &mut |name, t| {
                    if name == target {
                        t.data_mut()[i] = v;
                    }
                });
            }
        }
    }
    fn loss(&self) -> Result<f64> {
        project(&(self.forward)(&self.module, &self.inputs)?, &self.proj)
    }
    fn gradients(&self) -> Result<Vec<Vec<f64>>> {
        let mut m = self.module.clone();
        m.visit_params_mut("", &mut |_, t| t.clear_grad());
        let r = Tensor::from_vec(&self.proj_shape, self.proj.clone())?;
        let input_grads = (self.backward)(&mut m, &self.inputs, &r)?;
        let mut out: Vec<Vec<f64>> = input_grads.into_iter().map(Tensor::into_data).collect();
        m.visit_params("", &mut |_, t| {
            out.push(t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]));
        });
        Ok(out)
    }
}


mod suite;
pub use suite::{default_suite, SuiteCase, COMPOSITE_TOLERANCE, PRIMITIVE_TOLERANCE};
