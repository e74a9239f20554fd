use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::{AnnotatedImage, GrayImage, LabeledBox};
use crate::postprocess::BBox;

/// A single augmentation with all of its parameters fixed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugOp {
    HFlip,
    VFlip,
    /// Integer shift; uncovered pixels take the image mean.
    Translate { dx: i32, dy: i32 },
    /// Zoom about the image center with bilinear resampling.
    Scale { factor: f64 },
    Brightness { delta: f64 },
    Noise { sigma: f64, seed: u64 },
}

impl AugOp {
    /// Where a point `(x, y)` of a `w x h` image lands.
    pub fn map_point(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (w, h) = (w as f64, h as f64);
        match *self {
            AugOp::HFlip => (w - x, y),
            AugOp::VFlip => (x, h - y),
            AugOp::Translate { dx, dy } => (x + dx as f64, y + dy as f64),
            AugOp::Scale { factor } => ((x - w / 2.0) * factor + w / 2.0, (y - h / 2.0) * factor + h / 2.0),
            AugOp::Brightness { .. } | AugOp::Noise { .. } => (x, y),
        }
    }

    fn map_box(&self, b: &BBox, w: usize, h: usize) -> BBox {
        let (x1, y1) = self.map_point(b.x1, b.y1, w, h);
        let (x2, y2) = self.map_point(b.x2, b.y2, w, h);
        BBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
    }

    fn apply_pixels(&self, img: &GrayImage) -> GrayImage {
        let (w, h) = (img.width(), img.height());
        let mut out = img.clone();
        match *self {
            AugOp::HFlip => {
                for y in 0..h {
                    for x in 0..w {
                        out.set(x, y, img.get(w - 1 - x, y));
                    }
                }
            }
            AugOp::VFlip => {
                for y in 0..h {
                    for x in 0..w {
                        out.set(x, y, img.get(x, h - 1 - y));
                    }
                }
            }
            AugOp::Translate { dx, dy } => {
                let mean = img.pixels().iter().sum::<f64>() / img.pixels().len().max(1) as f64;
                for y in 0..h {
                    for x in 0..w {
                        let (sx, sy) = (x as i64 - dx as i64, y as i64 - dy as i64);
                        let v = if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                            img.get(sx as usize, sy as usize)
                        } else {
                            mean
                        };
                        out.set(x, y, v);
                    }
                }
            }
            AugOp::Scale { factor } => {
                let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
                for y in 0..h {
                    for x in 0..w {
                        let sx = (x as f64 + 0.5 - cx) / factor + cx - 0.5;
                        let sy = (y as f64 + 0.5 - cy) / factor + cy - 0.5;
                        let (x0, y0) = (sx.floor(), sy.floor());
                        let (fx, fy) = (sx - x0, sy - y0);
                        let (x0, y0) = (x0 as isize, y0 as isize);
                        let v = (1.0 - fy) * ((1.0 - fx) * img.get_clamped(x0, y0) + fx * img.get_clamped(x0 + 1, y0))
                            + fy * ((1.0 - fx) * img.get_clamped(x0, y0 + 1) + fx * img.get_clamped(x0 + 1, y0 + 1));
                        out.set(x, y, v);
                    }
                }
            }
            AugOp::Brightness { delta } => out.pixels_mut().iter_mut().for_each(|v| *v += delta),
            AugOp::Noise { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                if let Ok(n) = Normal::new(0.0, sigma) {
                    out.pixels_mut().iter_mut().for_each(|v| *v += n.sample(&mut rng));
                }
            }
        }
        out.clamp_unit();
        out
    }
}

/// Applies `ops` in order. Boxes follow the geometry, are clipped to the image
/// and dropped once their area falls below one square pixel.
pub fn augment(a: &AnnotatedImage, ops: &[AugOp]) -> AnnotatedImage {
    let (w, h) = (a.width(), a.height());
    let mut image = a.image.clone();
    let mut boxes = a.boxes.clone();
    for op in ops {
        image = op.apply_pixels(&image);
        boxes = boxes
            .iter()
            .map(|b| LabeledBox { class_id: b.class_id, bbox: op.map_box(&b.bbox, w, h).clip(w as f64, h as f64) })
            .filter(|b| b.bbox.is_valid() && b.bbox.area() >= 1.0)
            .collect();
    }
    AnnotatedImage {
        image,
        boxes,
        source: a.source.clone(),
        scale_factor: a.scale_factor,
    }
}

/// A random chain: each op is included with probability one half.
pub fn random_ops(rng: &mut impl Rng, w: usize, h: usize) -> Vec<AugOp> {
    let mut ops = Vec::new();
    if rng.random_bool(0.5) {
        ops.push(AugOp::HFlip);
    }
    if rng.random_bool(0.5) {
        ops.push(AugOp::VFlip);
    }
    if rng.random_bool(0.5) {
        let (mx, my) = ((w / 8).max(1) as i32, (h / 8).max(1) as i32);
        ops.push(AugOp::Translate { dx: rng.random_range(-mx..=mx), dy: rng.random_range(-my..=my) });
    }
    if rng.random_bool(0.5) {
        ops.push(AugOp::Scale { factor: rng.random_range(0.8..1.25) });
    }
    if rng.random_bool(0.5) {
        ops.push(AugOp::Brightness { delta: rng.random_range(-0.05..0.05) });
    }
    if rng.random_bool(0.5) {
        ops.push(AugOp::Noise { sigma: rng.random_range(0.0..0.02), seed: rng.random() });
    }
    ops
}
