use super::boxes::{BBox, Detection};
use crate::detnet::{ModelConfig, ANCHORS_PER_SCALE};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turns raw maps at strides 8/16 into per-image detections with score at least
/// `conf_threshold`.
///
/// Per anchor cell: `xy = (2σ(t) - 0.5 + cell) * stride`,
/// `wh = (2σ(t))² * anchor`, score `σ(obj) * max_k σ(cls_k)` with the first
/// maximal class. Boxes are clipped to the input and dropped if they collapse.
/// Order: scale, anchor, row, column.
pub fn decode<T: Real>(preds: &[Tensor<T>; 2], config: &ModelConfig, conf_threshold: f64) -> Result<Vec<Vec<Detection>>> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::invalid("decode", format!("confidence threshold {conf_threshold} outside [0, 1]")));
    }
    let no = config.outputs_per_anchor();
    let (n, _, h3, w3) = preds[0].dims4()?;
    let (img_h, img_w) = ((h3 * config.strides[0]) as f64, (w3 * config.strides[0]) as f64);
    let mut out = vec![Vec::new(); n];
    for (i, p) in preds.iter().enumerate() {
        let (pn, c, gh, gw) = p.dims4()?;
        if pn != n || c != ANCHORS_PER_SCALE * no {
            return Err(Error::invalid(
                "decode",
                format!("prediction shape {:?} inconsistent with {} outputs per anchor", p.shape(), no),
            ));
        }
        let s = config.strides[i] as f64;
        let raw = p.data();
        let hw = gh * gw;
        for (b, dets) in out.iter_mut().enumerate() {
            for (a, &(aw, ah)) in config.anchors[i].iter().enumerate() {
                let base = (b * c + a * no) * hw;
                let at = |j: usize, k: usize| raw[base + j * hw + k].to_f64();
                for y in 0..gh {
                    for x in 0..gw {
                        let k = y * gw + x;
                        let obj = sigmoid(at(4, k));
                        let (mut class_id, mut best) = (0, f64::NEG_INFINITY);
                        for cl in 0..config.num_classes {
                            let v = sigmoid(at(5 + cl, k));
                            if v > best {
                                best = v;
                                class_id = cl;
                            }
                        }
                        let score = obj * best;
                        if !(score >= conf_threshold) {
                            continue;
                        }
                        let cx = (2.0 * sigmoid(at(0, k)) - 0.5 + x as f64) * s;
                        let cy = (2.0 * sigmoid(at(1, k)) - 0.5 + y as f64) * s;
                        let bw = (2.0 * sigmoid(at(2, k))).powi(2) * aw;
                        let bh = (2.0 * sigmoid(at(3, k))).powi(2) * ah;
                        let bbox = BBox::from_center(cx, cy, bw, bh).clip(img_w, img_h);
                        if bbox.is_valid() {
                            dets.push(Detection { bbox, score, class_id });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
