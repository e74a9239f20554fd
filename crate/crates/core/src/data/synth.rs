use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Triangular};

use super::image::{AnnotatedImage, GrayImage, LabeledBox};
use crate::error::{Error, Result};
use crate::postprocess::BBox;

/// Full width at half maximum of a unit Gaussian: `2 sqrt(2 ln 2)`.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub level: f64,
    /// Peak-to-peak amplitude of a linear ramp in a random direction.
    pub gradient: f64,
    /// Standard deviation of the smoothed clutter field.
    pub clutter: f64,
    /// Box-blur radius of the clutter field in pixels.
    pub clutter_radius: usize,
    /// Standard deviation of white sensor noise.
    pub noise: f64,
}

impl Background {
    pub fn flat(level: f64) -> Self {
        Background {
            level,
            gradient: 0.0,
            clutter: 0.0,
            clutter_radius: 0,
            noise: 0.0,
        }
    }
}

impl Default for Background {
    fn default() -> Self {
        Background {
            level: 0.2,
            gradient: 0.1,
            clutter: 0.04,
            clutter_radius: 4,
            noise: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of the target count, drawn uniformly.
    pub targets: (usize, usize),
    /// Target size (FWHM in pixels) is triangular on this range.
    pub size_range: (f64, f64),
    pub size_mode: f64,
    /// Peak amplitude above background, uniform on this range.
    pub contrast: (f64, f64),
    pub background: Background,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 256,
            height: 256,
            targets: (1, 3),
            size_range: (2.0, 6.0),
            size_mode: 3.0,
            contrast: (0.3, 0.6),
            background: Background::default(),
            num_classes: 1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        let bad = |m: String| Err(Error::Scene(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("empty image {}x{}", self.width, self.height));
        }
        if self.targets.0 > self.targets.1 {
            return bad(format!("target count range {:?} is inverted", self.targets));
        }
        if !(lo >= 1.5 && lo <= self.size_mode && self.size_mode <= hi && hi.is_finite()) {
            return bad(format!(
                "size range {:?} with mode {} must satisfy 1.5 <= min <= mode <= max",
                self.size_range, self.size_mode
            ));
        }
        if !(self.contrast.0 > 0.0 && self.contrast.0 <= self.contrast.1 && self.contrast.1 <= 1.0) {
            return bad(format!("contrast range {:?} outside (0, 1]", self.contrast));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        let b = &self.background;
        if [b.level, b.gradient, b.clutter, b.noise].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad(format!("invalid background {b:?}"));
        }
        Ok(())
    }

    /// `E[count] * E[pi s^2 / 4] / (W H)`: the mean fraction of pixels inside
    /// the half-maximum disks of diameter `s`.
    pub fn expected_target_area_fraction(&self) -> f64 {
        let (a, b, c) = (self.size_range.0, self.size_range.1, self.size_mode);
        let e_s2 = (a * a + b * b + c * c + a * b + a * c + b * c) / 6.0;
        let e_n = (self.targets.0 + self.targets.1) as f64 / 2.0;
        e_n * std::f64::consts::PI * e_s2 / 4.0 / (self.width * self.height) as f64
    }
}

/// Ground truth of one rendered target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthTarget {
    pub cx: f64,
    pub cy: f64,
    /// FWHM in pixels.
    pub size: f64,
    pub sigma: f64,
    pub amplitude: f64,
    pub class_id: usize,
    /// Pixels whose centers lie inside the half-maximum disk.
    pub region_pixels: usize,
    /// Pixel with the largest target contribution.
    pub peak: (usize, usize),
}

fn box_blur(field: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return field.to_vec();
    }
    let r = r as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for k in -r..=r {
                    let (xx, yy) = if horizontal { (x + k, y) } else { (x, y + k) };
                    let xx = xx.clamp(0, w as isize - 1) as usize;
                    let yy = yy.clamp(0, h as isize - 1) as usize;
                    s += src[yy * w + xx];
                }
                out[y as usize * w + x as usize] = s / (2 * r + 1) as f64;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let b = &spec.background;
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let extent = (w as f64 * dx.abs() + h as f64 * dy.abs()).max(1.0);
    let mut px: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 - w as f64 / 2.0, (i / w) as f64 - h as f64 / 2.0);
            b.level + b.gradient * (x * dx + y * dy) / extent
        })
        .collect();
    let unit = Normal::new(0.0, 1.0).unwrap();
    if b.clutter > 0.0 {
        let white: Vec<f64> = (0..w * h).map(|_| unit.sample(rng)).collect();
        let smooth = box_blur(&white, w, h, b.clutter_radius);
        let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
        let sd = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64).sqrt();
        if sd > 0.0 {
            for (p, s) in px.iter_mut().zip(&smooth) {
                *p += b.clutter * (s - mean) / sd;
            }
        }
    }
    if b.noise > 0.0 {
        for p in &mut px {
            *p += b.noise * unit.sample(rng);
        }
    }
    px
}

/// Renders a scene and returns it with the per-target ground truth.
///
/// Pixel `(x, y)` has center `(x + 0.5, y + 0.5)`. A target with FWHM `s`
/// adds `a exp(-r^2 / 2 sigma^2)`, `sigma = s / FWHM_PER_SIGMA`; its box is the
/// half-open bounding box of the pixels with `r <= s / 2`.
pub fn synthesize_scene_detailed(spec: &SceneSpec) -> Result<(AnnotatedImage, Vec<SynthTarget>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let count = rng.random_range(spec.targets.0..=spec.targets.1);
    let sizes = Triangular::new(spec.size_range.0, spec.size_range.1, spec.size_mode)
        .map_err(|e| Error::Scene(format!("size distribution: {e}")))?;

    let mut placed: Vec<SynthTarget> = Vec::with_capacity(count);
    for t in 0..count {
        let size = sizes.sample(&mut rng);
        let margin = size + 1.0;
        if w as f64 <= 2.0 * margin || h as f64 <= 2.0 * margin {
            return Err(Error::Scene(format!(
                "target {t} of size {size:.2} does not fit a {w}x{h} image"
            )));
        }
        let amplitude = if spec.contrast.0 < spec.contrast.1 {
            rng.random_range(spec.contrast.0..=spec.contrast.1)
        } else {
            spec.contrast.0
        };
        let class_id = rng.random_range(0..spec.num_classes);
        let mut spot = None;
        for _ in 0..200 {
            let cx = rng.random_range(margin..w as f64 - margin);
            let cy = rng.random_range(margin..h as f64 - margin);
            let clear = placed.iter().all(|p| {
                let gap = (p.size + size) / 2.0 + 3.0;
                (p.cx - cx).abs() >= gap || (p.cy - cy).abs() >= gap
            });
            if clear {
                spot = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = spot else {
            return Err(Error::Scene(format!(
                "could not place target {} of {count} without overlap in {w}x{h}",
                t + 1
            )));
        };
        placed.push(SynthTarget {
            cx,
            cy,
            size,
            sigma: size / FWHM_PER_SIGMA,
            amplitude,
            class_id,
            region_pixels: 0,
            peak: (0, 0),
        });
    }

    let mut px = background(spec, &mut rng);
    let mut boxes = Vec::with_capacity(placed.len());
    for t in &mut placed {
        let reach = (4.0 * t.sigma).ceil() as isize + 1;
        let (x0, y0) = (t.cx.floor() as isize, t.cy.floor() as isize);
        let half2 = (t.size / 2.0).powi(2);
        let (mut bx1, mut by1, mut bx2, mut by2) = (usize::MAX, usize::MAX, 0, 0);
        let mut best = f64::NEG_INFINITY;
        for y in (y0 - reach).max(0)..(y0 + reach + 1).min(h as isize) {
            for x in (x0 - reach).max(0)..(x0 + reach + 1).min(w as isize) {
                let (x, y) = (x as usize, y as usize);
                let r2 = (x as f64 + 0.5 - t.cx).powi(2) + (y as f64 + 0.5 - t.cy).powi(2);
                let g = t.amplitude * (-r2 / (2.0 * t.sigma * t.sigma)).exp();
                px[y * w + x] += g;
                if g > best {
                    best = g;
                    t.peak = (x, y);
                }
                if r2 <= half2 {
                    t.region_pixels += 1;
                    bx1 = bx1.min(x);
                    by1 = by1.min(y);
                    bx2 = bx2.max(x + 1);
                    by2 = by2.max(y + 1);
                }
            }
        }
        boxes.push(LabeledBox {
            class_id: t.class_id,
            bbox: BBox::new(bx1 as f64, by1 as f64, bx2 as f64, by2 as f64),
        });
    }
    let mut image = GrayImage::from_vec(w, h, px)?;
    image.clamp_unit();
    let annotated = AnnotatedImage::new(image, boxes, format!("synth-{}", spec.seed), 1)?;
    Ok((annotated, placed))
}

pub fn synthesize_scene(spec: &SceneSpec) -> Result<AnnotatedImage> {
    synthesize_scene_detailed(spec).map(|(a, _)| a)
}

/// `n` scenes with seeds `seed, seed + 1, ...`.
pub fn synthesize_dataset(spec: &SceneSpec, n: usize) -> Result<Vec<AnnotatedImage>> {
    (0..n)
        .map(|i| {
            synthesize_scene(&SceneSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            })
        })
        .collect()
}
