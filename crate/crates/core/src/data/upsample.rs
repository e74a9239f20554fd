use std::fmt;
use std::str::FromStr;

use super::image::{AnnotatedImage, GrayImage, LabeledBox};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMethod {
    Nearest,
    Bilinear,
    Bicubic,
}

impl FromStr for UpsampleMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMethod::Nearest),
            "bilinear" => Ok(UpsampleMethod::Bilinear),
            "bicubic" => Ok(UpsampleMethod::Bicubic),
            _ => Err(Error::invalid("upsample", format!("unknown method {s:?} (nearest, bilinear, bicubic)"))),
        }
    }
}

impl fmt::Display for UpsampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMethod::Nearest => "nearest",
            UpsampleMethod::Bilinear => "bilinear",
            UpsampleMethod::Bicubic => "bicubic",
        })
    }
}

/// Keys cubic kernel with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Taps `(source index, weight)` for each output position of a 1-D resize by
/// an integer factor. Sample positions use pixel centers; borders replicate.
fn taps(n: usize, factor: usize, method: UpsampleMethod) -> Vec<Vec<(usize, f64)>> {
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    (0..n * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            match method {
                UpsampleMethod::Nearest => vec![(o / factor, 1.0)],
                UpsampleMethod::Bilinear => {
                    let i = src.floor();
                    let f = src - i;
                    vec![(clamp(i as isize), 1.0 - f), (clamp(i as isize + 1), f)]
                }
                UpsampleMethod::Bicubic => {
                    let i = src.floor() as isize;
                    let f = src - src.floor();
                    (-1..=2).map(|k| (clamp(i + k), cubic(f - k as f64))).collect()
                }
            }
        })
        .collect()
}

/// Separable integer-factor resize; values are clamped to `[0, 1]`.
pub fn resize_by(img: &GrayImage, factor: usize, method: UpsampleMethod) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let (tx, ty) = (taps(w, factor, method), taps(h, factor, method));
    let ow = w * factor;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for (x, t) in tx.iter().enumerate() {
            rows[y * ow + x] = t.iter().map(|&(i, wgt)| wgt * img.get(i, y)).sum();
        }
    }
    let mut out = vec![0.0; ow * h * factor];
    for (y, t) in ty.iter().enumerate() {
        for x in 0..ow {
            let v: f64 = t.iter().map(|&(i, wgt)| wgt * rows[i * ow + x]).sum();
            out[y * ow + x] = v.clamp(0.0, 1.0);
        }
    }
    GrayImage::from_vec(ow, h * factor, out).expect("sizes agree")
}

/// Upsamples pixels and boxes by `factor`.
pub fn upsample(a: &AnnotatedImage, factor: usize, method: UpsampleMethod) -> AnnotatedImage {
    let k = factor as f64;
    AnnotatedImage {
        image: resize_by(&a.image, factor, method),
        boxes: a.boxes.iter().map(|b| LabeledBox { class_id: b.class_id, bbox: b.bbox.scale(k) }).collect(),
        source: a.source.clone(),
        scale_factor: a.scale_factor * factor as u32,
    }
}

pub fn upsample4x(a: &AnnotatedImage, method: UpsampleMethod) -> AnnotatedImage {
    upsample(a, 4, method)
}
