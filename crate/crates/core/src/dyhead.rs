//! Dynamic head attention over multi-level features.
//!
//! Feature levels are first resampled onto the grid of the median level
//! (lower median for even `L`), giving an `L x S x C` view. A block then
//! applies, in order:
//!
//! 1. scale attention: each level is multiplied by
//!    `hard_sigmoid(f(mean_S(F_l)))`, `f` a 1x1 convolution `C -> 1`;
//! 2. spatial attention: `K = 9` deformable taps around every position,
//!    offsets and modulation predicted by a 3x3 convolution on the median
//!    level, weighted by per-tap scalars and averaged over levels;
//! 3. task attention: per channel `max(a1 x + b1, a2 x + b2)` with
//!    coefficients from a two-layer map of the `L x S`-pooled features,
//!    squashed to `[-1, 1]` by `2 sigmoid(z) - 1`.
//!
//! The spatial aggregate is shared by all levels, so the output keeps the
//! `(N, L, S, C)` shape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Module};
use crate::tensor::{
    avg_pool2x, avg_pool2x_backward, bilinear_at, bilinear_scatter, conv2d_backward,
    conv2d_forward, global_avg_pool, global_avg_pool_backward, upsample_nearest,
    upsample_nearest_backward, Activation, ConvParams, Real, Tensor,
};

/// Number of deformable sampling taps (regular 3x3 grid).
pub const SAMPLING_POINTS: usize = 9;
/// Reduction ratio of the coefficient map's hidden layer.
pub const THETA_REDUCTION: usize = 4;

/// Lower median level index.
pub fn median_level(levels: usize) -> usize {
    levels.saturating_sub(1) / 2
}

/// Regular grid position `P_k` as `(dy, dx)`.
pub fn base_offset(k: usize) -> (i32, i32) {
    ((k / 3) as i32 - 1, (k % 3) as i32 - 1)
}

/// Levels resampled onto one reference grid; every tensor is `(N, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLevels<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Real> FeatureLevels<T> {
    pub fn new(levels: Vec<Tensor<T>>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::invalid("feature_levels", "no levels"))?;
        for l in &levels {
            if l.shape() != first.shape() {
                return Err(Error::shape("feature_levels", first.shape(), l.shape()));
            }
            l.dims4()?;
        }
        Ok(FeatureLevels { levels })
    }

    /// `(N, L, C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let (n, c, h, w) = self.levels[0].dims4().expect("validated on construction");
        (n, self.levels.len(), c, h, w)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn zeros_like(&self) -> Self {
        FeatureLevels {
            levels: self.levels.iter().map(|l| Tensor::zeros(l.shape())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(T::zero(), T::max)
    }
}

/// How each native level maps to the reference grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelLayout {
    pub reference: usize,
    pub native: Vec<(usize, usize)>,
    pub reference_hw: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Resample {
    Same,
    /// Native grid is coarser: nearest upsample by this factor.
    Up(usize),
    /// Native grid is finer: average pool by this factor.
    Down(usize),
}

impl LevelLayout {
    fn rule(&self, l: usize) -> Resample {
        let (h, _) = self.native[l];
        let (rh, _) = self.reference_hw;
        if h == rh {
            Resample::Same
        } else if h < rh {
            Resample::Up(rh / h)
        } else {
            Resample::Down(h / rh)
        }
    }
}

/// Builds the canonical view by resampling every level to the median level's grid.
pub fn to_canonical<T: Real>(native: &[Tensor<T>]) -> Result<(FeatureLevels<T>, LevelLayout)> {
    if native.is_empty() {
        return Err(Error::invalid("to_canonical", "no levels"));
    }
    let reference = median_level(native.len());
    let (n, c, rh, rw) = native[reference].dims4()?;
    let mut dims = Vec::new();
    for t in native {
        let (tn, tc, h, w) = t.dims4()?;
        if tn != n || tc != c {
            return Err(Error::shape("to_canonical", native[reference].shape(), t.shape()));
        }
        let ok = if h <= rh {
            rh % h == 0 && rw % w == 0 && rh / h == rw / w
        } else {
            h % rh == 0 && w % rw == 0 && h / rh == w / rw
        };
        if !ok {
            return Err(Error::invalid(
                "to_canonical",
                format!("level {:?} is not an integer rescale of reference {:?}", t.shape(), native[reference].shape()),
            ));
        }
        dims.push((h, w));
    }
    let layout = LevelLayout {
        reference,
        native: dims,
        reference_hw: (rh, rw),
    };
    let levels = native
        .iter()
        .enumerate()
        .map(|(l, t)| match layout.rule(l) {
            Resample::Same => Ok(t.clone()),
            Resample::Up(f) => upsample_nearest(t, f),
            Resample::Down(f) => avg_pool2x(t, f),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((FeatureLevels { levels }, layout))
}

pub fn to_canonical_backward<T: Real>(
    layout: &LevelLayout,
    grad: &FeatureLevels<T>,
) -> Result<Vec<Tensor<T>>> {
    grad.levels
        .iter()
        .enumerate()
        .map(|(l, g)| match layout.rule(l) {
            Resample::Same => Ok(g.clone()),
            Resample::Up(f) => upsample_nearest_backward(g, f),
            Resample::Down(f) => avg_pool2x_backward(g, f),
        })
        .collect()
}

/// Resamples the canonical view back to each level's native grid.
pub fn from_canonical<T: Real>(
    features: &FeatureLevels<T>,
    layout: &LevelLayout,
) -> Result<Vec<Tensor<T>>> {
    features
        .levels
        .iter()
        .enumerate()
        .map(|(l, t)| match layout.rule(l) {
            Resample::Same => Ok(t.clone()),
            Resample::Up(f) => avg_pool2x(t, f),
            Resample::Down(f) => upsample_nearest(t, f),
        })
        .collect()
}

pub fn from_canonical_backward<T: Real>(
    layout: &LevelLayout,
    grads: &[Tensor<T>],
) -> Result<FeatureLevels<T>> {
    let levels = grads
        .iter()
        .enumerate()
        .map(|(l, g)| match layout.rule(l) {
            Resample::Same => Ok(g.clone()),
            Resample::Up(f) => avg_pool2x_backward(g, f),
            Resample::Down(f) => upsample_nearest_backward(g, f),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureLevels { levels })
}

/// Parameters of one scale -> spatial -> task attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct DyHeadBlock<T> {
    /// `f`: 1x1, `C -> 1`.
    pub scale_fc: ConvParams<T>,
    /// 3x3, `C -> 3K`: `2K` offsets `(dy, dx)` interleaved, then `K` modulation logits.
    pub offset_conv: ConvParams<T>,
    /// Per-tap scalar weights, shared across channels.
    pub spatial_weights: Tensor<T>,
    /// `C -> C/r`, followed by ReLU.
    pub theta_fc1: ConvParams<T>,
    /// `C/r -> 4C`, laid out `[a1 | a2 | b1 | b2]`.
    pub theta_fc2: ConvParams<T>,
    pub channels: usize,
}

/// Task-attention coefficients, each `(N, C)` and inside `[-1, 1]` when produced by θ.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCoefficients<T> {
    pub alpha1: Tensor<T>,
    pub alpha2: Tensor<T>,
    pub beta1: Tensor<T>,
    pub beta2: Tensor<T>,
}

impl<T: Real> TaskCoefficients<T> {
    /// Same coefficients for every sample and channel.
    pub fn uniform(n: usize, c: usize, a1: T, a2: T, b1: T, b2: T) -> Self {
        TaskCoefficients {
            alpha1: Tensor::full(&[n, c], a1),
            alpha2: Tensor::full(&[n, c], a2),
            beta1: Tensor::full(&[n, c], b1),
            beta2: Tensor::full(&[n, c], b2),
        }
    }

    pub fn iter_all(&self) -> impl Iterator<Item = T> + '_ {
        self.alpha1
            .data()
            .iter()
            .chain(self.alpha2.data())
            .chain(self.beta1.data())
            .chain(self.beta2.data())
            .copied()
    }
}

/// Logit giving `a1 ≈ 0.905` at initialization so the block starts close to ReLU.
const ALPHA1_INIT_LOGIT: f64 = 3.0;

impl<T: Real> DyHeadBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("dyhead", "channels must be positive"));
        }
        let k = SAMPLING_POINTS;
        let hidden = (channels / THETA_REDUCTION).max(1);
        let mut theta_fc2 = ConvParams::zeros(4 * channels, hidden, 1, 1, 0, 1);
        for v in &mut theta_fc2.bias.data_mut()[..channels] {
            *v = T::from_f64(ALPHA1_INIT_LOGIT);
        }
        Ok(DyHeadBlock {
            scale_fc: ConvParams::zeros(1, channels, 1, 1, 0, 1),
            offset_conv: ConvParams::zeros(3 * k, channels, 3, 1, 1, 1),
            spatial_weights: Tensor::full(&[k], T::from_f64(2.0 / k as f64)),
            theta_fc1: ConvParams::kaiming(hidden, channels, 1, 1, 0, 1, rng),
            theta_fc2,
            channels,
        })
    }

    fn check(&self, f: &FeatureLevels<T>, op: &'static str) -> Result<()> {
        let (_, _, c, _, _) = f.dims();
        if c != self.channels {
            return Err(Error::invalid(
                op,
                format!("features have {c} channels, block expects {}", self.channels),
            ));
        }
        Ok(())
    }
}

impl<T: Real> Module<T> for DyHeadBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.scale_fc.visit_params(&join(prefix, "scale_fc"), f);
        self.offset_conv.visit_params(&join(prefix, "offset_conv"), f);
        f(&join(prefix, "spatial_weights"), &self.spatial_weights);
        self.theta_fc1.visit_params(&join(prefix, "theta_fc1"), f);
        self.theta_fc2.visit_params(&join(prefix, "theta_fc2"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.scale_fc.visit_params_mut(&join(prefix, "scale_fc"), f);
        self.offset_conv.visit_params_mut(&join(prefix, "offset_conv"), f);
        f(&join(prefix, "spatial_weights"), &mut self.spatial_weights);
        self.theta_fc1.visit_params_mut(&join(prefix, "theta_fc1"), f);
        self.theta_fc2.visit_params_mut(&join(prefix, "theta_fc2"), f);
    }
}

fn as_column<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    t.clone().reshape(&[s[0], s[1], 1, 1])
}

// ---------------------------------------------------------------- scale

#[derive(Clone, Debug)]
pub struct ScaleCache<T> {
    input: FeatureLevels<T>,
    pooled: Vec<Tensor<T>>,
    logits: Vec<Tensor<T>>,
}

/// Per-level, per-sample gates `hard_sigmoid(f(mean_S F_l))`, each `(N)`.
pub fn scale_gates<T: Real>(f: &FeatureLevels<T>, block: &DyHeadBlock<T>) -> Result<Vec<Vec<T>>> {
    block.check(f, "scale_attention")?;
    f.levels
        .iter()
        .map(|l| {
            let z = conv2d_forward(&as_column(&global_avg_pool(l)?)?, &block.scale_fc)?;
            Ok(z.data().iter().map(|&v| Activation::HardSigmoid.apply(v)).collect())
        })
        .collect()
}

fn apply_gates<T: Real>(f: &FeatureLevels<T>, gates: &[Vec<T>]) -> FeatureLevels<T> {
    let levels = f
        .levels
        .iter()
        .zip(gates)
        .map(|(l, g)| {
            let per = l.len() / g.len();
            let mut out = l.clone();
            for (chunk, &gate) in out.data_mut().chunks_mut(per).zip(g) {
                chunk.iter_mut().for_each(|v| *v *= gate);
            }
            out
        })
        .collect();
    FeatureLevels { levels }
}

pub fn scale_attention<T: Real>(f: &FeatureLevels<T>, block: &DyHeadBlock<T>) -> Result<FeatureLevels<T>> {
    let gates = scale_gates(f, block)?;
    Ok(apply_gates(f, &gates))
}

fn scale_forward_train<T: Real>(
    f: &FeatureLevels<T>,
    block: &DyHeadBlock<T>,
) -> Result<(FeatureLevels<T>, ScaleCache<T>)> {
    block.check(f, "scale_attention")?;
    let mut pooled = Vec::new();
    let mut logits = Vec::new();
    let mut gates = Vec::new();
    for l in &f.levels {
        let p = as_column(&global_avg_pool(l)?)?;
        let z = conv2d_forward(&p, &block.scale_fc)?;
        gates.push(z.data().iter().map(|&v| Activation::HardSigmoid.apply(v)).collect::<Vec<_>>());
        pooled.push(p);
        logits.push(z);
    }
    let out = apply_gates(f, &gates);
    Ok((
        out,
        ScaleCache {
            input: f.clone(),
            pooled,
            logits,
        },
    ))
}

fn scale_backward<T: Real>(
    block: &mut DyHeadBlock<T>,
    cache: &ScaleCache<T>,
    grad: &FeatureLevels<T>,
) -> Result<FeatureLevels<T>> {
    let mut out = Vec::new();
    for ((x, g), (p, z)) in cache
        .input
        .levels
        .iter()
        .zip(&grad.levels)
        .zip(cache.pooled.iter().zip(&cache.logits))
    {
        let n = z.len();
        let per = x.len() / n;
        let mut dx = g.clone();
        let mut dz = vec![T::zero(); n];
        for b in 0..n {
            let gate = Activation::HardSigmoid.apply(z.data()[b]);
            let xs = &x.data()[b * per..(b + 1) * per];
            let gs = &g.data()[b * per..(b + 1) * per];
            let dgate: T = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
            dz[b] = dgate * Activation::HardSigmoid.derivative(z.data()[b]);
            dx.data_mut()[b * per..(b + 1) * per]
                .iter_mut()
                .for_each(|v| *v *= gate);
        }
        let cg = conv2d_backward(p, &block.scale_fc, &Tensor::from_vec(z.shape(), dz)?)?;
        block.scale_fc.weight.accumulate_grad(cg.weight.data());
        block.scale_fc.bias.accumulate_grad(cg.bias.data());
        let (pn, pc, _, _) = p.dims4()?;
        let dp = cg.input.reshape(&[pn, pc])?;
        dx.add_assign(&global_avg_pool_backward(x.shape(), &dp)?)?;
        out.push(dx);
    }
    Ok(FeatureLevels { levels: out })
}

// -------------------------------------------------------------- spatial

/// Deformable aggregation with explicit offsets and modulation.
///
/// `offsets` is `(N, 2K, H, W)` with `(dy, dx)` of tap `k` at channels `2k, 2k+1`;
/// `modulation` is `(N, K, H, W)`; `weights` is `(K)`. Returns `(N, C, H, W)`:
/// `(1/L) Σ_l Σ_k w_k m_k(p) F_l(p + P_k + ΔP_k(p))`.
pub fn deformable_aggregate<T: Real>(
    f: &FeatureLevels<T>,
    offsets: &Tensor<T>,
    modulation: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, l, c, h, w) = f.dims();
    let k = weights.len();
    check_deform_shapes(n, h, w, k, offsets, modulation)?;
    let hw = h * w;
    let inv_l = T::from_f64(1.0 / l as f64);
    let mut out = vec![T::zero(); n * c * hw];
    let off = offsets.data();
    let md = modulation.data();
    let wt = weights.data();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for tap in 0..k {
                    let (by, bx) = base_offset(tap);
                    let py = T::from_f64((y as i32 + by) as f64) + off[(b * 2 * k + 2 * tap) * hw + p];
                    let px = T::from_f64((x as i32 + bx) as f64) + off[(b * 2 * k + 2 * tap + 1) * hw + p];
                    let coef = wt[tap] * md[(b * k + tap) * hw + p] * inv_l;
                    for level in &f.levels {
                        let s = level.sample(b);
                        for ch in 0..c {
                            let v = bilinear_at(&s[ch * hw..(ch + 1) * hw], h, w, py, px).0;
                            out[(b * c + ch) * hw + p] += coef * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

fn check_deform_shapes<T: Real>(
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    offsets: &Tensor<T>,
    modulation: &Tensor<T>,
) -> Result<()> {
    if offsets.shape() != [n, 2 * k, h, w] {
        return Err(Error::shape("deformable_aggregate", &[n, 2 * k, h, w], offsets.shape()));
    }
    if modulation.shape() != [n, k, h, w] {
        return Err(Error::shape("deformable_aggregate", &[n, k, h, w], modulation.shape()));
    }
    Ok(())
}

/// Gradients of [`deformable_aggregate`].
#[derive(Clone, Debug)]
pub struct DeformGrads<T> {
    pub features: FeatureLevels<T>,
    pub offsets: Tensor<T>,
    pub modulation: Tensor<T>,
    pub weights: Tensor<T>,
}

pub fn deformable_aggregate_backward<T: Real>(
    f: &FeatureLevels<T>,
    offsets: &Tensor<T>,
    modulation: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DeformGrads<T>> {
    let (n, l, c, h, w) = f.dims();
    let k = weights.len();
    check_deform_shapes(n, h, w, k, offsets, modulation)?;
    if grad_out.shape() != [n, c, h, w] {
        return Err(Error::shape("deformable_aggregate_backward", &[n, c, h, w], grad_out.shape()));
    }
    let hw = h * w;
    let inv_l = T::from_f64(1.0 / l as f64);
    let off = offsets.data();
    let md = modulation.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut d_levels: Vec<Vec<T>> = f.levels.iter().map(|t| vec![T::zero(); t.len()]).collect();
    let mut d_off = vec![T::zero(); offsets.len()];
    let mut d_mod = vec![T::zero(); modulation.len()];
    let mut d_w = vec![T::zero(); k];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for tap in 0..k {
                    let (by, bx) = base_offset(tap);
                    let iy = (b * 2 * k + 2 * tap) * hw + p;
                    let ix = iy + hw;
                    let im = (b * k + tap) * hw + p;
                    let py = T::from_f64((y as i32 + by) as f64) + off[iy];
                    let px = T::from_f64((x as i32 + bx) as f64) + off[ix];
                    let m = md[im];
                    let coef = wt[tap] * m * inv_l;
                    // Σ_l Σ_c v * g and the coordinate derivatives.
                    let (mut sv, mut sy, mut sx) = (T::zero(), T::zero(), T::zero());
                    for (level, dl) in f.levels.iter().zip(d_levels.iter_mut()) {
                        let s = level.sample(b);
                        for ch in 0..c {
                            let up = g[(b * c + ch) * hw + p];
                            let base = (b * c + ch) * hw;
                            let (v, dvy, dvx) = bilinear_at(&s[ch * hw..(ch + 1) * hw], h, w, py, px);
                            sv += v * up;
                            sy += dvy * up;
                            sx += dvx * up;
                            bilinear_scatter(&mut dl[base..base + hw], h, w, py, px, coef * up);
                        }
                    }
                    d_off[iy] += coef * sy;
                    d_off[ix] += coef * sx;
                    d_mod[im] += wt[tap] * inv_l * sv;
                    d_w[tap] += m * inv_l * sv;
                }
            }
        }
    }
    let levels = d_levels
        .into_iter()
        .zip(&f.levels)
        .map(|(d, t)| Tensor::from_vec(t.shape(), d))
        .collect::<Result<Vec<_>>>()?;
    Ok(DeformGrads {
        features: FeatureLevels { levels },
        offsets: Tensor::from_vec(offsets.shape(), d_off)?,
        modulation: Tensor::from_vec(modulation.shape(), d_mod)?,
        weights: Tensor::from_vec(weights.shape(), d_w)?,
    })
}

/// Offsets `(N, 2K, H, W)` and sigmoid modulation `(N, K, H, W)` predicted
/// from the median level.
pub fn predict_offsets<T: Real>(
    f: &FeatureLevels<T>,
    block: &DyHeadBlock<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let raw = conv2d_forward(&f.levels[median_level(f.num_levels())], &block.offset_conv)?;
    let (offsets, modulation) = split_offset_raw(&raw)?;
    Ok((raw, offsets, modulation))
}

fn split_offset_raw<T: Real>(raw: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c3, h, w) = raw.dims4()?;
    let k = c3 / 3;
    let hw = h * w;
    let mut off = Vec::with_capacity(n * 2 * k * hw);
    let mut md = Vec::with_capacity(n * k * hw);
    for b in 0..n {
        let s = raw.sample(b);
        off.extend_from_slice(&s[..2 * k * hw]);
        md.extend(s[2 * k * hw..].iter().map(|&v| Activation::Sigmoid.apply(v)));
    }
    Ok((
        Tensor::from_vec(&[n, 2 * k, h, w], off)?,
        Tensor::from_vec(&[n, k, h, w], md)?,
    ))
}

fn broadcast_levels<T: Real>(agg: Tensor<T>, l: usize) -> FeatureLevels<T> {
    FeatureLevels {
        levels: vec![agg; l],
    }
}

pub fn spatial_attention<T: Real>(f: &FeatureLevels<T>, block: &DyHeadBlock<T>) -> Result<FeatureLevels<T>> {
    block.check(f, "spatial_attention")?;
    let (_, offsets, modulation) = predict_offsets(f, block)?;
    let agg = deformable_aggregate(f, &offsets, &modulation, &block.spatial_weights)?;
    Ok(broadcast_levels(agg, f.num_levels()))
}

#[derive(Clone, Debug)]
pub struct SpatialCache<T> {
    input: FeatureLevels<T>,
    raw: Tensor<T>,
    offsets: Tensor<T>,
    modulation: Tensor<T>,
}

fn spatial_forward_train<T: Real>(
    f: &FeatureLevels<T>,
    block: &DyHeadBlock<T>,
) -> Result<(FeatureLevels<T>, SpatialCache<T>)> {
    block.check(f, "spatial_attention")?;
    let (raw, offsets, modulation) = predict_offsets(f, block)?;
    let agg = deformable_aggregate(f, &offsets, &modulation, &block.spatial_weights)?;
    Ok((
        broadcast_levels(agg, f.num_levels()),
        SpatialCache {
            input: f.clone(),
            raw,
            offsets,
            modulation,
        },
    ))
}

fn spatial_backward<T: Real>(
    block: &mut DyHeadBlock<T>,
    cache: &SpatialCache<T>,
    grad: &FeatureLevels<T>,
) -> Result<FeatureLevels<T>> {
    let mut g_agg = grad.levels[0].clone();
    for g in &grad.levels[1..] {
        g_agg.add_assign(g)?;
    }
    let dg = deformable_aggregate_backward(
        &cache.input,
        &cache.offsets,
        &cache.modulation,
        &block.spatial_weights,
        &g_agg,
    )?;
    block.spatial_weights.accumulate_grad(dg.weights.data());

    let (n, c3, h, w) = cache.raw.dims4()?;
    let k = c3 / 3;
    let hw = h * w;
    let mut d_raw = Vec::with_capacity(cache.raw.len());
    for b in 0..n {
        d_raw.extend_from_slice(dg.offsets.sample(b));
        let logits = &cache.raw.sample(b)[2 * k * hw..];
        for (z, dm) in logits.iter().zip(dg.modulation.sample(b)) {
            d_raw.push(*dm * Activation::Sigmoid.derivative(*z));
        }
    }
    let d_raw = Tensor::from_vec(cache.raw.shape(), d_raw)?;
    let m = median_level(cache.input.num_levels());
    let cg = conv2d_backward(&cache.input.levels[m], &block.offset_conv, &d_raw)?;
    block.offset_conv.weight.accumulate_grad(cg.weight.data());
    block.offset_conv.bias.accumulate_grad(cg.bias.data());
    let mut out = dg.features;
    out.levels[m].add_assign(&cg.input)?;
    Ok(out)
}

// ----------------------------------------------------------------- task

#[derive(Clone, Debug)]
pub struct TaskCache<T> {
    input: FeatureLevels<T>,
    pooled: Tensor<T>,
    hidden_pre: Tensor<T>,
    logits: Tensor<T>,
    coefficients: TaskCoefficients<T>,
}

fn pool_levels<T: Real>(f: &FeatureLevels<T>) -> Result<Tensor<T>> {
    let l = T::from_f64(1.0 / f.num_levels() as f64);
    let mut acc = global_avg_pool(&f.levels[0])?;
    for level in &f.levels[1..] {
        acc.add_assign(&global_avg_pool(level)?)?;
    }
    as_column(&acc.scale(l))
}

fn theta_forward<T: Real>(
    f: &FeatureLevels<T>,
    block: &DyHeadBlock<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, TaskCoefficients<T>)> {
    let pooled = pool_levels(f)?;
    let hidden_pre = conv2d_forward(&pooled, &block.theta_fc1)?;
    let hidden = hidden_pre.map(|v| v.max(T::zero()));
    let logits = conv2d_forward(&hidden, &block.theta_fc2)?;
    let (n, c) = (f.dims().0, block.channels);
    let two = T::from_f64(2.0);
    let mut parts: Vec<Vec<T>> = vec![Vec::with_capacity(n * c); 4];
    for b in 0..n {
        let z = logits.sample(b);
        for (j, part) in parts.iter_mut().enumerate() {
            part.extend(z[j * c..(j + 1) * c].iter().map(|&v| two * Activation::Sigmoid.apply(v) - T::one()));
        }
    }
    let mut it = parts.into_iter().map(|p| Tensor::from_vec(&[n, c], p));
    let coefficients = TaskCoefficients {
        alpha1: it.next().unwrap()?,
        alpha2: it.next().unwrap()?,
        beta1: it.next().unwrap()?,
        beta2: it.next().unwrap()?,
    };
    Ok((pooled, hidden_pre, logits, coefficients))
}

/// θ: pooled features -> two-layer map -> `2 sigmoid - 1`.
pub fn task_coefficients<T: Real>(
    f: &FeatureLevels<T>,
    block: &DyHeadBlock<T>,
) -> Result<TaskCoefficients<T>> {
    block.check(f, "task_attention")?;
    Ok(theta_forward(f, block)?.3)
}

/// `max(a1 x + b1, a2 x + b2)` per channel with the given coefficients.
pub fn apply_task_coefficients<T: Real>(
    f: &FeatureLevels<T>,
    coeffs: &TaskCoefficients<T>,
) -> Result<FeatureLevels<T>> {
    let (n, _, c, h, w) = f.dims();
    if coeffs.alpha1.shape() != [n, c] {
        return Err(Error::shape("task_attention", &[n, c], coeffs.alpha1.shape()));
    }
    let hw = h * w;
    let levels = f
        .levels
        .iter()
        .map(|level| {
            let mut out = level.clone();
            for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
                let (a1, a2) = (coeffs.alpha1.data()[i], coeffs.alpha2.data()[i]);
                let (b1, b2) = (coeffs.beta1.data()[i], coeffs.beta2.data()[i]);
                for v in plane {
                    *v = (a1 * *v + b1).max(a2 * *v + b2);
                }
            }
            out
        })
        .collect();
    Ok(FeatureLevels { levels })
}

pub fn task_attention<T: Real>(f: &FeatureLevels<T>, block: &DyHeadBlock<T>) -> Result<FeatureLevels<T>> {
    let coeffs = task_coefficients(f, block)?;
    apply_task_coefficients(f, &coeffs)
}

fn task_forward_train<T: Real>(
    f: &FeatureLevels<T>,
    block: &DyHeadBlock<T>,
) -> Result<(FeatureLevels<T>, TaskCache<T>)> {
    block.check(f, "task_attention")?;
    let (pooled, hidden_pre, logits, coefficients) = theta_forward(f, block)?;
    let out = apply_task_coefficients(f, &coefficients)?;
    Ok((
        out,
        TaskCache {
            input: f.clone(),
            pooled,
            hidden_pre,
            logits,
            coefficients,
        },
    ))
}

fn task_backward<T: Real>(
    block: &mut DyHeadBlock<T>,
    cache: &TaskCache<T>,
    grad: &FeatureLevels<T>,
) -> Result<FeatureLevels<T>> {
    let (n, l, c, h, w) = cache.input.dims();
    let hw = h * w;
    let co = &cache.coefficients;
    // [a1 | a2 | b1 | b2] per sample
    let mut d_coef = vec![T::zero(); n * 4 * c];
    let mut levels = Vec::with_capacity(l);
    for (x, g) in cache.input.levels.iter().zip(&grad.levels) {
        let mut dx = vec![T::zero(); x.len()];
        for i in 0..n * c {
            let (b, ch) = (i / c, i % c);
            let (a1, a2) = (co.alpha1.data()[i], co.alpha2.data()[i]);
            let (b1, b2) = (co.beta1.data()[i], co.beta2.data()[i]);
            let xs = &x.data()[i * hw..(i + 1) * hw];
            let gs = &g.data()[i * hw..(i + 1) * hw];
            let (mut da1, mut da2, mut db1, mut db2) = (T::zero(), T::zero(), T::zero(), T::zero());
            for ((&v, &up), d) in xs.iter().zip(gs).zip(&mut dx[i * hw..(i + 1) * hw]) {
                if a1 * v + b1 >= a2 * v + b2 {
                    *d = a1 * up;
                    da1 += v * up;
                    db1 += up;
                } else {
                    *d = a2 * up;
                    da2 += v * up;
                    db2 += up;
                }
            }
            let base = b * 4 * c;
            d_coef[base + ch] += da1;
            d_coef[base + c + ch] += da2;
            d_coef[base + 2 * c + ch] += db1;
            d_coef[base + 3 * c + ch] += db2;
        }
        levels.push(Tensor::from_vec(x.shape(), dx)?);
    }
    let two = T::from_f64(2.0);
    let d_logits: Vec<T> = d_coef
        .iter()
        .zip(cache.logits.data())
        .map(|(&d, &z)| d * two * Activation::Sigmoid.derivative(z))
        .collect();
    let d_logits = Tensor::from_vec(cache.logits.shape(), d_logits)?;
    let hidden = cache.hidden_pre.map(|v| v.max(T::zero()));
    let g2 = conv2d_backward(&hidden, &block.theta_fc2, &d_logits)?;
    block.theta_fc2.weight.accumulate_grad(g2.weight.data());
    block.theta_fc2.bias.accumulate_grad(g2.bias.data());
    let d_hidden_pre = cache
        .hidden_pre
        .zip_map(&g2.input, |z, g| if z > T::zero() { g } else { T::zero() })?;
    let g1 = conv2d_backward(&cache.pooled, &block.theta_fc1, &d_hidden_pre)?;
    block.theta_fc1.weight.accumulate_grad(g1.weight.data());
    block.theta_fc1.bias.accumulate_grad(g1.bias.data());
    let inv_l = T::from_f64(1.0 / l as f64);
    let d_pooled = g1.input.reshape(&[n, c])?.scale(inv_l);
    let spread = global_avg_pool_backward(&[n, c, h, w], &d_pooled)?;
    for level in &mut levels {
        level.add_assign(&spread)?;
    }
    Ok(FeatureLevels { levels })
}

// ---------------------------------------------------------------- block

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    scale: ScaleCache<T>,
    spatial: SpatialCache<T>,
    task: TaskCache<T>,
}

impl<T: Real> DyHeadBlock<T> {
    /// `task(spatial(scale(F)))`.
    pub fn forward(&self, f: &FeatureLevels<T>) -> Result<FeatureLevels<T>> {
        let a = scale_attention(f, self)?;
        let b = spatial_attention(&a, self)?;
        task_attention(&b, self)
    }

    pub fn forward_train(&self, f: &FeatureLevels<T>) -> Result<(FeatureLevels<T>, BlockCache<T>)> {
        let (a, scale) = scale_forward_train(f, self)?;
        let (b, spatial) = spatial_forward_train(&a, self)?;
        let (c, task) = task_forward_train(&b, self)?;
        Ok((c, BlockCache { scale, spatial, task }))
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, grad: &FeatureLevels<T>) -> Result<FeatureLevels<T>> {
        let g = task_backward(self, &cache.task, grad)?;
        let g = spatial_backward(self, &cache.spatial, &g)?;
        scale_backward(self, &cache.scale, &g)
    }
}

pub fn dyhead_block<T: Real>(f: &FeatureLevels<T>, block: &DyHeadBlock<T>) -> Result<FeatureLevels<T>> {
    block.forward(f)
}

/// Independently parameterized blocks applied in sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DyHeadStack<T> {
    pub blocks: Vec<DyHeadBlock<T>>,
}

impl<T: Real> DyHeadStack<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, depth: usize, rng: &mut R) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid("dyhead_stack", "stack needs at least one block"));
        }
        let blocks = (0..depth).map(|_| DyHeadBlock::new(channels, rng)).collect::<Result<_>>()?;
        Ok(DyHeadStack { blocks })
    }

    pub fn forward(&self, f: &FeatureLevels<T>) -> Result<FeatureLevels<T>> {
        dyhead_stack(f, &self.blocks)
    }

    pub fn forward_train(&self, f: &FeatureLevels<T>) -> Result<(FeatureLevels<T>, Vec<BlockCache<T>>)> {
        let mut x = f.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward_train(&x)?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn backward(&mut self, caches: &[BlockCache<T>], grad: &FeatureLevels<T>) -> Result<FeatureLevels<T>> {
        let mut g = grad.clone();
        for (b, c) in self.blocks.iter_mut().zip(caches).rev() {
            g = b.backward(c, &g)?;
        }
        Ok(g)
    }
}

pub fn dyhead_stack<T: Real>(f: &FeatureLevels<T>, blocks: &[DyHeadBlock<T>]) -> Result<FeatureLevels<T>> {
    let (first, rest) = blocks
        .split_first()
        .ok_or_else(|| Error::invalid("dyhead_stack", "stack needs at least one block"))?;
    let mut x = first.forward(f)?;
    for b in rest {
        x = b.forward(&x)?;
    }
    Ok(x)
}

impl<T: Real> Module<T> for DyHeadStack<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Input gradient of one block, accumulating parameter gradients into `block`.
pub fn dyhead_block_backward<T: Real>(
    f: &FeatureLevels<T>,
    block: &mut DyHeadBlock<T>,
    grad: &FeatureLevels<T>,
) -> Result<FeatureLevels<T>> {
    let (_, cache) = block.forward_train(f)?;
    block.backward(&cache, grad)
}
