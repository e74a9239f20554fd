//! Brute-force references for the model-level blocks. They read parameters
//! from library structs but recompute every output with plain loops.

use irnet_core::detnet::ModelConfig;
use irnet_core::dyhead::{DyHeadBlock, FeatureLevels, SAMPLING_POINTS as K};
use irnet_core::msfa::MsfaBlock;
use irnet_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{bilinear_brute, conv_brute, sigmoid, silu};

/// Direct loops only: dilated conv + SiLU, 1x1 conv, sum.
pub fn msfa_brute(x: &[f64], dims: (usize, usize, usize, usize), b: &MsfaBlock<f64>) -> Vec<f64> {
    let (n, _, h, w) = dims;
    let mut out = vec![0.0; n * b.out_channels * h * w];
    for (bc, pc) in b.branch_convs.iter().zip(&b.point_convs) {
        let d = bc.conv.dilation;
        let (mid, _, _) = conv_brute(x, dims, bc.conv.weight.data(), bc.conv.bias.data(), (b.mid_channels, 3, 3), 1, d, d);
        let mid: Vec<f64> = mid.into_iter().map(silu).collect();
        let (y, _, _) = conv_brute(
            &mid,
            (n, b.mid_channels, h, w),
            pc.conv.weight.data(),
            pc.conv.bias.data(),
            (b.out_channels, 1, 1),
            1,
            0,
            1,
        );
        for (o, v) in out.iter_mut().zip(y) {
            *o += v;
        }
    }
    out
}

/// Explicit loops over batch, position, tap, level and channel with a hand bilinear read.
pub fn spatial_brute(f: &FeatureLevels<f64>, block: &DyHeadBlock<f64>) -> Vec<f64> {
    let (n, l, c, h, w) = f.dims();
    let hw = h * w;
    let med = (l - 1) / 2;
    let oc = &block.offset_conv;
    let (raw, _, _) = conv_brute(f.levels[med].data(), (n, c, h, w), oc.weight.data(), oc.bias.data(), (3 * K, 3, 3), 1, 1, 1);
    let mut out = vec![0.0; n * c * hw];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let at = |ch: usize| raw[(b * 3 * K + ch) * hw + y * w + x];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for lv in 0..l {
                        let plane = &f.levels[lv].data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        for k in 0..K {
                            let py = y as f64 + (k / 3) as f64 - 1.0 + at(2 * k);
                            let px = x as f64 + (k % 3) as f64 - 1.0 + at(2 * k + 1);
                            let m = sigmoid(at(2 * K + k));
                            acc += block.spatial_weights.data()[k] * m * bilinear_brute(plane, h, w, py, px);
                        }
                    }
                    out[(b * c + ch) * hw + y * w + x] = acc / l as f64;
                }
            }
        }
    }
    out
}

fn conv(ci: usize, co: usize, k: usize) -> usize {
    co * ci * k * k + co
}

fn c3(ci: usize, co: usize, n: usize) -> usize {
    let h = (co / 2).max(1);
    2 * conv(ci, h, 1) + n * (conv(h, h, 1) + conv(h, h, 3)) + conv(2 * h, co, 1)
}

fn dyhead_block(c: usize) -> usize {
    let hid = (c / 4).max(1);
    (c + 1) + conv(c, 27, 3) + 9 + (hid * c + hid) + (4 * c * hid + 4 * c)
}

/// Parameter count written out from the layer table.
pub fn param_oracle(cfg: &ModelConfig) -> usize {
    let w: Vec<usize> = [64.0, 128.0, 256.0, 512.0, 1024.0]
        .iter()
        .map(|b: &f64| ((b * cfg.width).round() as usize).max(2))
        .collect();
    let n = cfg.depth;
    let c = w[2];
    let no = 3 * (5 + cfg.num_classes);
    let mid = (w[4] / 2).max(1);
    let msfa = cfg.msfa_dilations.len() * (conv(w[4], mid, 3) + conv(mid, w[4], 1));
    conv(cfg.in_channels, w[0], 3)
        + conv(w[0], w[1], 3)
        + c3(w[1], w[1], n)
        + conv(w[1], w[2], 3)
        + c3(w[2], w[2], n)
        + conv(w[2], w[3], 3)
        + c3(w[3], w[3], n)
        + conv(w[3], w[4], 3)
        + c3(w[4], w[4], n)
        + msfa
        + conv(w[4], w[3], 1)
        + c3(2 * w[3], w[3], n)
        + conv(w[3], w[2], 1)
        + c3(2 * w[2], w[2], n)
        + 2 * conv(w[2], w[2], 3)
        + c3(2 * w[2], w[3], n)
        + conv(w[2], c, 1)
        + conv(w[3], c, 1)
        + cfg.dyhead_blocks * dyhead_block(c)
        + 2 * conv(c, no, 1)
}

/// Scalar decode written from the formula, indexing `[b][a*no + j][y][x]`.
pub fn decode_oracle(preds: &[Tensor<f64>; 2], cfg: &ModelConfig, conf: f64) -> Vec<Vec<(f64, f64, f64, f64, f64, usize)>> {
    let no = 5 + cfg.num_classes;
    let n = preds[0].shape()[0];
    let img_h = (preds[0].shape()[2] * 8) as f64;
    let img_w = (preds[0].shape()[3] * 8) as f64;
    let mut out = vec![Vec::new(); n];
    for (s, p) in preds.iter().enumerate() {
        let sh = p.shape();
        let (gh, gw) = (sh[2], sh[3]);
        let get = |b: usize, ch: usize, y: usize, x: usize| p.data()[((b * sh[1] + ch) * gh + y) * gw + x];
        let stride = [8.0, 16.0][s];
        for b in 0..n {
            for a in 0..3 {
                for y in 0..gh {
                    for x in 0..gw {
                        let v = |j| get(b, a * no + j, y, x);
                        let mut best = (0, sigmoid(v(5)));
                        for c in 1..cfg.num_classes {
                            if sigmoid(v(5 + c)) > best.1 {
                                best = (c, sigmoid(v(5 + c)));
                            }
                        }
                        let score = sigmoid(v(4)) * best.1;
                        if score < conf {
                            continue;
                        }
                        let cx = (x as f64 + 2.0 * sigmoid(v(0)) - 0.5) * stride;
                        let cy = (y as f64 + 2.0 * sigmoid(v(1)) - 0.5) * stride;
                        let w = 4.0 * sigmoid(v(2)) * sigmoid(v(2)) * cfg.anchors[s][a].0;
                        let h = 4.0 * sigmoid(v(3)) * sigmoid(v(3)) * cfg.anchors[s][a].1;
                        let x1 = (cx - w / 2.0).max(0.0).min(img_w);
                        let x2 = (cx + w / 2.0).max(0.0).min(img_w);
                        let y1 = (cy - h / 2.0).max(0.0).min(img_h);
                        let y2 = (cy + h / 2.0).max(0.0).min(img_h);
                        if x1 < x2 && y1 < y2 {
                            out[b].push((x1, y1, x2, y2, score, best.0));
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn random_maps(r: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize, h: usize, w: usize) -> [Tensor<f64>; 2] {
    let c = 3 * (5 + cfg.num_classes);
    let mut mk = |gh: usize, gw: usize| {
        let data = (0..n * c * gh * gw).map(|_| r.random_range(-4.0..3.0)).collect();
        Tensor::from_vec(&[n, c, gh, gw], data).unwrap()
    };
    [mk(h / 8, w / 8), mk(h / 16, w / 16)]
}
