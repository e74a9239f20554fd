use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, INPUT_MULTIPLE};
use crate::dyhead::{
    from_canonical, from_canonical_backward, to_canonical, to_canonical_backward, BlockCache, DyHeadStack,
    LevelLayout,
};
use crate::error::{Error, Result};
use crate::msfa::{MsfaBlock, MsfaCache};
use crate::nn::{join, C3Cache, ConvCache, ConvUnit, Module, C3};
use crate::tensor::{
    concat_channels, conv2d_backward, conv2d_forward, split_channels, upsample_nearest, upsample_nearest_backward,
    Activation, ConvParams, Real, Tensor,
};

/// Objectness logit prior at initialization (σ ≈ 0.01).
const OBJ_PRIOR_LOGIT: f64 = -4.6;

/// One row of the layer listing.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    /// Output shape `(C, H, W)` for the queried input size.
    pub output: [usize; 3],
    pub params: usize,
}

/// Backbone with MSFA tail, two-output neck, attention head and prediction convs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub stem: ConvUnit<T>,
    pub down1: ConvUnit<T>,
    pub stage1: C3<T>,
    pub down2: ConvUnit<T>,
    pub stage2: C3<T>,
    pub down3: ConvUnit<T>,
    pub stage3: C3<T>,
    pub down4: ConvUnit<T>,
    pub stage4: C3<T>,
    pub msfa: MsfaBlock<T>,
    /// Top-down path.
    pub lateral5: ConvUnit<T>,
    pub merge4: C3<T>,
    pub lateral4: ConvUnit<T>,
    pub merge3: C3<T>,
    /// Extra 3x3 convolution between the two neck outputs.
    pub bridge: ConvUnit<T>,
    /// Bottom-up path to the stride-16 output.
    pub pan_down: ConvUnit<T>,
    pub pan4: C3<T>,
    pub project: [ConvUnit<T>; 2],
    pub dyhead: DyHeadStack<T>,
    pub predict: [ConvParams<T>; 2],
}

/// Everything the backward pass needs from one training forward.
#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    stem: ConvCache<T>,
    down1: ConvCache<T>,
    stage1: C3Cache<T>,
    down2: ConvCache<T>,
    stage2: C3Cache<T>,
    down3: ConvCache<T>,
    stage3: C3Cache<T>,
    down4: ConvCache<T>,
    stage4: C3Cache<T>,
    msfa: MsfaCache<T>,
    lateral5: ConvCache<T>,
    merge4: C3Cache<T>,
    lateral4: ConvCache<T>,
    merge3: C3Cache<T>,
    bridge: ConvCache<T>,
    pan_down: ConvCache<T>,
    pan4: C3Cache<T>,
    project: [ConvCache<T>; 2],
    layout: LevelLayout,
    dyhead: Vec<BlockCache<T>>,
    head_in: [Tensor<T>; 2],
    widths: Widths,
}

#[derive(Clone, Copy, Debug)]
struct Widths {
    w: [usize; 5],
}

impl<T: Real> Model<T> {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let w: Vec<usize> = (0..5).map(|i| config.stage_width(i)).collect();
        let n = config.depth;
        let c = config.head_width();
        let silu = Activation::Silu;
        let conv = |cin, cout, k, s, r: &mut ChaCha8Rng| ConvUnit::new(cin, cout, k, s, silu, r);
        let no = config.outputs_per_cell();
        let mut predict = [ConvParams::kaiming(no, c, 1, 1, 0, 1, r), ConvParams::kaiming(no, c, 1, 1, 0, 1, r)];
        let cls_prior = (0.6 / (config.num_classes as f64 - 0.99)).ln();
        for p in &mut predict {
            let per = config.outputs_per_anchor();
            for (i, b) in p.bias.data_mut().iter_mut().enumerate() {
                *b = T::from_f64(match i % per {
                    4 => OBJ_PRIOR_LOGIT,
                    j if j >= 5 => cls_prior,
                    _ => 0.0,
                });
            }
        }
        Ok(Model {
            config: config.clone(),
            stem: conv(config.in_channels, w[0], 3, 2, r),
            down1: conv(w[0], w[1], 3, 2, r),
            stage1: C3::new(w[1], w[1], n, true, r),
            down2: conv(w[1], w[2], 3, 2, r),
            stage2: C3::new(w[2], w[2], n, true, r),
            down3: conv(w[2], w[3], 3, 2, r),
            stage3: C3::new(w[3], w[3], n, true, r),
            down4: conv(w[3], w[4], 3, 2, r),
            stage4: C3::new(w[4], w[4], n, true, r),
            msfa: MsfaBlock::new(w[4], (w[4] / 2).max(1), w[4], &config.msfa_dilations, r)?,
            lateral5: conv(w[4], w[3], 1, 1, r),
            merge4: C3::new(2 * w[3], w[3], n, false, r),
            lateral4: conv(w[3], w[2], 1, 1, r),
            merge3: C3::new(2 * w[2], w[2], n, false, r),
            bridge: conv(w[2], w[2], 3, 1, r),
            pan_down: conv(w[2], w[2], 3, 2, r),
            pan4: C3::new(2 * w[2], w[3], n, false, r),
            project: [
                ConvUnit::new(w[2], c, 1, 1, Activation::Identity, r),
                ConvUnit::new(w[3], c, 1, 1, Activation::Identity, r),
            ],
            dyhead: DyHeadStack::new(c, config.dyhead_blocks, r)?,
            predict,
        })
    }

    fn widths(&self) -> Widths {
        let mut w = [0; 5];
        for (i, v) in w.iter_mut().enumerate() {
            *v = self.config.stage_width(i);
        }
        Widths { w }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::invalid(
                "model_forward",
                format!("input shape {:?} has {c} channels, model expects {}", x.shape(), self.config.in_channels),
            ));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            let up = |v: usize| v.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
            return Err(Error::invalid(
                "model_forward",
                format!(
                    "input {h}x{w} is not a multiple of {INPUT_MULTIPLE}; pad by {} rows and {} cols to {}x{}",
                    up(h) - h,
                    up(w) - w,
                    up(h),
                    up(w)
                ),
            ));
        }
        Ok(())
    }

    /// Raw prediction maps at strides 8 and 16, each `(N, 3(5+nc), H/s, W/s)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 2]> {
        self.check_input(x)?;
        let a = self.down1.forward(&self.stem.forward(x)?)?;
        let a = self.stage1.forward(&a)?;
        let p3 = self.stage2.forward(&self.down2.forward(&a)?)?;
        let p4 = self.stage3.forward(&self.down3.forward(&p3)?)?;
        let p5 = self.stage4.forward(&self.down4.forward(&p4)?)?;
        let p5 = self.msfa.forward(&p5)?;

        let l5 = self.lateral5.forward(&p5)?;
        let m4 = self.merge4.forward(&concat_channels(&[&upsample_nearest(&l5, 2)?, &p4])?)?;
        let l4 = self.lateral4.forward(&m4)?;
        let out3 = self.merge3.forward(&concat_channels(&[&upsample_nearest(&l4, 2)?, &p3])?)?;
        let d = self.pan_down.forward(&self.bridge.forward(&out3)?)?;
        let out4 = self.pan4.forward(&concat_channels(&[&d, &l4])?)?;

        let levels = [self.project[0].forward(&out3)?, self.project[1].forward(&out4)?];
        let (canon, layout) = to_canonical(&levels)?;
        let attended = from_canonical(&self.dyhead.forward(&canon)?, &layout)?;
        Ok([
            conv2d_forward(&attended[0], &self.predict[0])?,
            conv2d_forward(&attended[1], &self.predict[1])?,
        ])
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<([Tensor<T>; 2], ModelCache<T>)> {
        self.check_input(x)?;
        let (a, stem) = self.stem.forward_train(x)?;
        let (a, down1) = self.down1.forward_train(&a)?;
        let (a, stage1) = self.stage1.forward_train(&a)?;
        let (a, down2) = self.down2.forward_train(&a)?;
        let (p3, stage2) = self.stage2.forward_train(&a)?;
        let (a, down3) = self.down3.forward_train(&p3)?;
        let (p4, stage3) = self.stage3.forward_train(&a)?;
        let (a, down4) = self.down4.forward_train(&p4)?;
        let (a, stage4) = self.stage4.forward_train(&a)?;
        let (p5, msfa) = self.msfa.forward_train(&a)?;

        let (l5, lateral5) = self.lateral5.forward_train(&p5)?;
        let (m4, merge4) = self.merge4.forward_train(&concat_channels(&[&upsample_nearest(&l5, 2)?, &p4])?)?;
        let (l4, lateral4) = self.lateral4.forward_train(&m4)?;
        let (out3, merge3) = self.merge3.forward_train(&concat_channels(&[&upsample_nearest(&l4, 2)?, &p3])?)?;
        let (b, bridge) = self.bridge.forward_train(&out3)?;
        let (d, pan_down) = self.pan_down.forward_train(&b)?;
        let (out4, pan4) = self.pan4.forward_train(&concat_channels(&[&d, &l4])?)?;

        let (q3, pc3) = self.project[0].forward_train(&out3)?;
        let (q4, pc4) = self.project[1].forward_train(&out4)?;
        let (canon, layout) = to_canonical(&[q3, q4])?;
        let (att, dyhead) = self.dyhead.forward_train(&canon)?;
        let head_in = from_canonical(&att, &layout)?;
        let preds = [
            conv2d_forward(&head_in[0], &self.predict[0])?,
            conv2d_forward(&head_in[1], &self.predict[1])?,
        ];
        let head_in = [head_in[0].clone(), head_in[1].clone()];
        let cache = ModelCache {
            stem,
            down1,
            stage1,
            down2,
            stage2,
            down3,
            stage3,
            down4,
            stage4,
            msfa,
            lateral5,
            merge4,
            lateral4,
            merge3,
            bridge,
            pan_down,
            pan4,
            project: [pc3, pc4],
            layout,
            dyhead,
            head_in,
            widths: self.widths(),
        };
        Ok((preds, cache))
    }

    /// Accumulates parameter gradients from the two prediction-map gradients and
    /// returns the input gradient.
    pub fn backward(&mut self, cache: &ModelCache<T>, grads: &[Tensor<T>; 2]) -> Result<Tensor<T>> {
        let w = cache.widths.w;
        let mut head_grads = Vec::with_capacity(2);
        for i in 0..2 {
            let g = conv2d_backward(&cache.head_in[i], &self.predict[i], &grads[i])?;
            self.predict[i].weight.accumulate_grad(g.weight.data());
            self.predict[i].bias.accumulate_grad(g.bias.data());
            head_grads.push(g.input);
        }
        let g_att = from_canonical_backward(&cache.layout, &head_grads)?;
        let g_canon = self.dyhead.backward(&cache.dyhead, &g_att)?;
        let g_levels = to_canonical_backward(&cache.layout, &g_canon)?;
        let mut g_out3 = self.project[0].backward(&cache.project[0], &g_levels[0])?;
        let g_out4 = self.project[1].backward(&cache.project[1], &g_levels[1])?;

        let g_cat = self.pan4.backward(&cache.pan4, &g_out4)?;
        let mut parts = split_channels(&g_cat, &[w[2], w[2]])?.into_iter();
        let (g_d, mut g_l4) = (parts.next().unwrap(), parts.next().unwrap());
        let g_b = self.pan_down.backward(&cache.pan_down, &g_d)?;
        g_out3.add_assign(&self.bridge.backward(&cache.bridge, &g_b)?)?;

        let g_cat = self.merge3.backward(&cache.merge3, &g_out3)?;
        let mut parts = split_channels(&g_cat, &[w[2], w[2]])?.into_iter();
        let (g_up4, mut g_p3) = (parts.next().unwrap(), parts.next().unwrap());
        g_l4.add_assign(&upsample_nearest_backward(&g_up4, 2)?)?;
        let g_m4 = self.lateral4.backward(&cache.lateral4, &g_l4)?;
        let g_cat = self.merge4.backward(&cache.merge4, &g_m4)?;
        let mut parts = split_channels(&g_cat, &[w[3], w[3]])?.into_iter();
        let (g_up5, mut g_p4) = (parts.next().unwrap(), parts.next().unwrap());
        let g_l5 = upsample_nearest_backward(&g_up5, 2)?;
        let g_p5 = self.lateral5.backward(&cache.lateral5, &g_l5)?;

        let g = self.msfa.backward(&cache.msfa, &g_p5)?;
        let g = self.stage4.backward(&cache.stage4, &g)?;
        g_p4.add_assign(&self.down4.backward(&cache.down4, &g)?)?;
        let g = self.stage3.backward(&cache.stage3, &g_p4)?;
        g_p3.add_assign(&self.down3.backward(&cache.down3, &g)?)?;
        let g = self.stage2.backward(&cache.stage2, &g_p3)?;
        let g = self.down2.backward(&cache.down2, &g)?;
        let g = self.stage1.backward(&cache.stage1, &g)?;
        let g = self.down1.backward(&cache.down1, &g)?;
        self.stem.backward(&cache.stem, &g)
    }

    /// Named sub-modules in visitation order with their kinds.
    fn parts(&self) -> Vec<(&'static str, &'static str, &dyn Module<T>)> {
        vec![
            ("stem", "conv3x3/2", &self.stem as &dyn Module<T>),
            ("down1", "conv3x3/2", &self.down1),
            ("stage1", "c3", &self.stage1),
            ("down2", "conv3x3/2", &self.down2),
            ("stage2", "c3", &self.stage2),
            ("down3", "conv3x3/2", &self.down3),
            ("stage3", "c3", &self.stage3),
            ("down4", "conv3x3/2", &self.down4),
            ("stage4", "c3", &self.stage4),
            ("msfa", "msfa", &self.msfa),
            ("lateral5", "conv1x1", &self.lateral5),
            ("merge4", "c3", &self.merge4),
            ("lateral4", "conv1x1", &self.lateral4),
            ("merge3", "c3", &self.merge3),
            ("bridge", "conv3x3", &self.bridge),
            ("pan_down", "conv3x3/2", &self.pan_down),
            ("pan4", "c3", &self.pan4),
            ("project3", "conv1x1", &self.project[0]),
            ("project4", "conv1x1", &self.project[1]),
            ("dyhead", "dyhead", &self.dyhead),
            ("predict3", "conv1x1", &self.predict[0]),
            ("predict4", "conv1x1", &self.predict[1]),
        ]
    }

    /// Layer listing with output shapes for an `h x w` input.
    pub fn layers(&self, h: usize, w: usize) -> Vec<LayerInfo> {
        let wd = self.widths().w;
        let c = self.config.head_width();
        let no = self.config.outputs_per_cell();
        let at = |s: usize| (h / s, w / s);
        let shape = |ch: usize, s: usize| [ch, at(s).0, at(s).1];
        let outputs = [
            shape(wd[0], 2),
            shape(wd[1], 4),
            shape(wd[1], 4),
            shape(wd[2], 8),
            shape(wd[2], 8),
            shape(wd[3], 16),
            shape(wd[3], 16),
            shape(wd[4], 32),
            shape(wd[4], 32),
            shape(wd[4], 32),
            shape(wd[3], 32),
            shape(wd[3], 16),
            shape(wd[2], 16),
            shape(wd[2], 8),
            shape(wd[2], 8),
            shape(wd[2], 16),
            shape(wd[3], 16),
            shape(c, 8),
            shape(c, 16),
            shape(c, 8),
            shape(no, 8),
            shape(no, 16),
        ];
        self.parts()
            .into_iter()
            .zip(outputs)
            .map(|((name, kind, m), output)| LayerInfo {
                name: name.to_string(),
                kind,
                output,
                params: m.param_count(),
            })
            .collect()
    }
}

impl<T: Real> Module<T> for Model<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (name, _, m) in self.parts() {
            m.visit_params(&join(prefix, name), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let names = ["project3", "project4", "predict3", "predict4"];
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        self.down1.visit_params_mut(&join(prefix, "down1"), f);
        self.stage1.visit_params_mut(&join(prefix, "stage1"), f);
        self.down2.visit_params_mut(&join(prefix, "down2"), f);
        self.stage2.visit_params_mut(&join(prefix, "stage2"), f);
        self.down3.visit_params_mut(&join(prefix, "down3"), f);
        self.stage3.visit_params_mut(&join(prefix, "stage3"), f);
        self.down4.visit_params_mut(&join(prefix, "down4"), f);
        self.stage4.visit_params_mut(&join(prefix, "stage4"), f);
        self.msfa.visit_params_mut(&join(prefix, "msfa"), f);
        self.lateral5.visit_params_mut(&join(prefix, "lateral5"), f);
        self.merge4.visit_params_mut(&join(prefix, "merge4"), f);
        self.lateral4.visit_params_mut(&join(prefix, "lateral4"), f);
        self.merge3.visit_params_mut(&join(prefix, "merge3"), f);
        self.bridge.visit_params_mut(&join(prefix, "bridge"), f);
        self.pan_down.visit_params_mut(&join(prefix, "pan_down"), f);
        self.pan4.visit_params_mut(&join(prefix, "pan4"), f);
        self.project[0].visit_params_mut(&join(prefix, names[0]), f);
        self.project[1].visit_params_mut(&join(prefix, names[1]), f);
        self.dyhead.visit_params_mut(&join(prefix, "dyhead"), f);
        self.predict[0].visit_params_mut(&join(prefix, names[2]), f);
        self.predict[1].visit_params_mut(&join(prefix, names[3]), f);
    }
}
