//! Box overlays on graymaps and line charts as portable pixmaps.

use irnet_core::data::{write_ppm, GrayImage};
use irnet_core::postprocess::BBox;

/// Copy of `img` with the outline of every box drawn at `value`.
pub fn overlay(img: &GrayImage, boxes: &[BBox], value: f64) -> GrayImage {
    let mut out = img.clone();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            out.set(x as usize, y as usize, value);
        }
    };
    for b in boxes {
        let (x1, y1) = (b.x1.floor() as i64, b.y1.floor() as i64);
        let (x2, y2) = ((b.x2.ceil() as i64 - 1).max(x1), (b.y2.ceil() as i64 - 1).max(y1));
        // one pixel outside the box so the target itself stays visible
        let (x1, y1, x2, y2) = (x1 - 1, y1 - 1, x2 + 1, y2 + 1);
        for x in x1..=x2 {
            put(x, y1);
            put(x, y2);
        }
        for y in y1..=y2 {
            put(x1, y);
            put(x2, y);
        }
    }
    out
}

const PALETTE: [[u8; 3]; 4] = [[200, 30, 30], [30, 90, 200], [20, 150, 60], [150, 60, 170]];

/// Line chart of `series` (points `(x, y)`) on shared axes, as PPM bytes.
pub fn line_chart(series: &[Vec<(f64, f64)>], width: usize, height: usize) -> Vec<u8> {
    let mut rgb = vec![255u8; width * height * 3];
    let margin = 24usize;
    let pts = series.iter().flatten().filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return write_ppm(width, height, &rgb);
    }
    let y0 = y0.min(0.0);
    let (xs, ys) = ((x1 - x0).max(1e-12), (y1 - y0).max(1e-12));
    let (pw, ph) = ((width - 2 * margin) as f64, (height - 2 * margin) as f64);
    let to_px = |x: f64, y: f64| {
        (
            margin as i64 + ((x - x0) / xs * pw).round() as i64,
            (height - margin) as i64 - ((y - y0) / ys * ph).round() as i64,
        )
    };
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if (0..width as i64).contains(&x) && (0..height as i64).contains(&y) {
            let i = (y as usize * width + x as usize) * 3;
            rgb[i..i + 3].copy_from_slice(&c);
        }
    };
    let axis = [0u8, 0, 0];
    for x in margin..width - margin {
        put(x as i64, (height - margin) as i64, axis);
    }
    for y in margin..=height - margin {
        put(margin as i64, y as i64, axis);
    }
    for (k, s) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let s: Vec<(i64, i64)> = s.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| to_px(x, y)).collect();
        for p in &s {
            put(p.0, p.1, c);
        }
        for w in s.windows(2) {
            let (a, b) = (w[0], w[1]);
            let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
            for i in 0..=n {
                let t = i as f64 / n as f64;
                put(
                    (a.0 as f64 + t * (b.0 - a.0) as f64).round() as i64,
                    (a.1 as f64 + t * (b.1 - a.1) as f64).round() as i64,
                    c,
                );
            }
        }
    }
    write_ppm(width, height, &rgb)
}
