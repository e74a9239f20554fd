use crate::detnet::Target;
use crate::error::{Error, Result};
use crate::postprocess::BBox;
use crate::tensor::{Real, Tensor};

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(
                "image",
                format!("{} pixels for a {width}x{height} image", pixels.len()),
            ));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Reads with coordinates clamped to the border.
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn clamp_unit(&mut self) {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Pads right and bottom with `value` up to the given size.
    pub fn padded(&self, width: usize, height: usize, value: f64) -> Self {
        let mut out = GrayImage::filled(width.max(self.width), height.max(self.height), value);
        for y in 0..self.height {
            let dst = y * out.width;
            out.pixels[dst..dst + self.width].copy_from_slice(&self.pixels[y * self.width..(y + 1) * self.width]);
        }
        out
    }
}

/// A box with its class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub class_id: usize,
    /// 0-based half-open pixel box.
    pub bbox: BBox,
}

/// An image with its boxes, checked at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: GrayImage,
    pub boxes: Vec<LabeledBox>,
    pub source: String,
    /// 1 for native resolution, 4 after upsampling.
    pub scale_factor: u32,
}

impl AnnotatedImage {
    pub fn new(image: GrayImage, boxes: Vec<LabeledBox>, source: impl Into<String>, scale_factor: u32) -> Result<Self> {
        let (w, h) = (image.width as f64, image.height as f64);
        for (i, b) in boxes.iter().enumerate() {
            let r = b.bbox;
            if !r.is_valid() || r.x1 < 0.0 || r.y1 < 0.0 || r.x2 > w || r.y2 > h {
                return Err(Error::invalid(
                    "annotated_image",
                    format!("box {i} {r:?} is not well-ordered inside {w}x{h}"),
                ));
            }
        }
        if let Some(i) = image.pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "annotated_image",
                format!("pixel {i} value {} outside [0, 1]", image.pixels[i]),
            ));
        }
        Ok(AnnotatedImage {
            image,
            boxes,
            source: source.into(),
            scale_factor,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// Loss targets in normalized center format relative to a `width x height` canvas.
    pub fn targets(&self, image_index: usize, width: usize, height: usize) -> Vec<Target> {
        let (w, h) = (width as f64, height as f64);
        self.boxes
            .iter()
            .map(|b| {
                let (cx, cy) = b.bbox.center();
                Target {
                    image: image_index,
                    class: b.class_id,
                    cx: cx / w,
                    cy: cy / h,
                    w: b.bbox.width() / w,
                    h: b.bbox.height() / h,
                }
            })
            .collect()
    }
}

/// Stacks images into an `N x 1 x H x W` batch padded with zeros to the next
/// multiple of `multiple`, with matching loss targets.
pub fn make_batch<T: Real>(items: &[&AnnotatedImage], multiple: usize) -> Result<(Tensor<T>, Vec<Target>)> {
    let Some(first) = items.first() else {
        return Err(Error::invalid("make_batch", "empty batch"));
    };
    let (w, h) = (first.width(), first.height());
    if let Some(bad) = items.iter().find(|a| a.width() != w || a.height() != h) {
        return Err(Error::invalid(
            "make_batch",
            format!("mixed sizes {w}x{h} and {}x{} ({})", bad.width(), bad.height(), bad.source),
        ));
    }
    let (pw, ph) = (w.div_ceil(multiple) * multiple, h.div_ceil(multiple) * multiple);
    let mut data = Vec::with_capacity(items.len() * pw * ph);
    let mut targets = Vec::new();
    for (i, a) in items.iter().enumerate() {
        let img = if (pw, ph) == (w, h) { a.image.clone() } else { a.image.padded(pw, ph, 0.0) };
        data.extend(img.pixels.iter().map(|&v| T::from_f64(v)));
        targets.extend(a.targets(i, pw, ph));
    }
    Ok((Tensor::from_vec(&[items.len(), 1, ph, pw], data)?, targets))
}
