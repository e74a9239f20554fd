//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's kernels: every routine is written
//! out with plain nested loops over flat `f64` buffers.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct cross-correlation: loops over n, co, oy, ox, ci, ky, kx.
#[allow(clippy::too_many_arguments)]
pub fn conv_brute(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    dil: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let wo = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += weight[((co * cin + ci) * kh + ky) * kw + kx]
                                    * x[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hand bilinear read with zero padding.
pub fn bilinear_brute(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - (y - y0)), (1.0, y - y0)] {
        for (dx, wx) in [(0.0, 1.0 - (x - x0)), (1.0, x - x0)] {
            let yy = y0 + dy;
            let xx = x0 + dx;
            if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
                acc += wy * wx * plane[yy as usize * w + xx as usize];
            }
        }
    }
    acc
}

/// Finite-difference derivative of a scalar function.
pub fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Plain box: `(x1, y1, x2, y2)`.
pub type BoxF = [f64; 4];

pub fn iou_brute(a: BoxF, b: BoxF) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// O(n^2) greedy NMS: repeatedly take the best unsuppressed box of each class.
/// Ties in score keep input order. Returns indices into `dets` in output order.
pub fn nms_brute(dets: &[(BoxF, f64, usize)], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !alive[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if dets[i].1 > dets[b].1 => best = Some(i),
                _ => {}
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        kept.push(b);
        for j in 0..dets.len() {
            if alive[j] && dets[j].2 == dets[b].2 && iou_brute(dets[b].0, dets[j].0) > thr {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Independent single-class AP: sort detections by score (stable), greedy
/// match to the best-IoU unmatched GT in the same image, all-points envelope.
/// `dets`: (image, box, score); `gts`: (image, box).
pub fn ap_brute(dets: &[(usize, BoxF, f64)], gts: &[(usize, BoxF)], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // insertion sort by descending score keeps ties in input order
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && dets[order[j]].2 > dets[order[j - 1]].2 {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::new();
    for &d in &order {
        let (img, bx, _) = dets[d];
        let mut best = -1.0;
        let mut best_g = None;
        for (g, &(gi, gb)) in gts.iter().enumerate() {
            if gi != img || used[g] {
                continue;
            }
            let v = iou_brute(bx, gb);
            if v > best {
                best = v;
                best_g = Some(g);
            }
        }
        match best_g {
            Some(g) if best >= thr => {
                used[g] = true;
                tp.push(true);
            }
            _ => tp.push(false),
        }
    }
    let npos = gts.len() as f64;
    let (mut ctp, mut cfp) = (0.0, 0.0);
    let mut rec = vec![0.0];
    let mut prec = vec![1.0];
    for &t in &tp {
        if t {
            ctp += 1.0
        } else {
            cfp += 1.0
        }
        rec.push(ctp / npos);
        prec.push(ctp / (ctp + cfp));
    }
    // envelope: precision at recall r is the max precision at any recall >= r
    let mut ap = 0.0;
    for i in 1..rec.len() {
        let p = prec[i..].iter().cloned().fold(0.0, f64::max);
        ap += (rec[i] - rec[i - 1]) * p;
    }
    Some(ap)
}

mod models;
#[allow(unused_imports)]
pub use models::*;
