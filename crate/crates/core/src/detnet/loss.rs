//! Detection loss: CIoU box term, BCE objectness with IoU soft labels, BCE class term.
//!
//! Raw maps are `(N, 3(5+nc), H, W)` with per-anchor layout
//! `[tx, ty, tw, th, obj, cls...]`. Decoding in grid units:
//! `xy = 2σ(t) - 0.5 + cell`, `wh = (2σ(t))² · anchor / stride`.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Sub};

use super::config::{ModelConfig, ANCHORS_PER_SCALE};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One ground-truth box, normalized center format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub image: usize,
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub box_gain: f64,
    pub obj_gain: f64,
    pub cls_gain: f64,
    /// Maximum target/anchor side ratio for a match.
    pub anchor_threshold: f64,
    /// Per-scale weight on the objectness term.
    pub balance: [f64; 2],
    /// Objectness label: `(1 - iou_ratio) + iou_ratio * iou` on positives.
    pub iou_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            box_gain: 0.05,
            obj_gain: 1.0,
            cls_gain: 0.5,
            anchor_threshold: 4.0,
            balance: [4.0, 1.0],
            iou_ratio: 1.0,
        }
    }
}

/// Scalar loss, its weighted components and the gradient w.r.t. each raw map.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub total: f64,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub grads: [Tensor<T>; 2],
}

/// A target assigned to one anchor of one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub image: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub class: usize,
    /// Target box in grid units relative to the cell corner: `(x, y, w, h)`.
    pub tbox: [f64; 4],
    /// Anchor in grid units.
    pub anchor_wh: (f64, f64),
}

/// Ratio matching plus neighbor-cell expansion for one scale with grid `gh x gw`.
pub fn build_targets(
    targets: &[Target],
    anchors_px: &[(f64, f64); ANCHORS_PER_SCALE],
    stride: usize,
    grid: (usize, usize),
    anchor_threshold: f64,
) -> Vec<Assignment> {
    let (gh, gw) = grid;
    let s = stride as f64;
    let mut out = Vec::new();
    for t in targets {
        let (x, y, w, h) = (t.cx * gw as f64, t.cy * gh as f64, t.w * gw as f64, t.h * gh as f64);
        for (a, &(aw, ah)) in anchors_px.iter().enumerate() {
            let (aw, ah) = (aw / s, ah / s);
            let rw = w / aw;
            let rh = h / ah;
            if rw.max(1.0 / rw).max(rh).max(1.0 / rh) >= anchor_threshold {
                continue;
            }
            let (xi, yi) = (gw as f64 - x, gh as f64 - y);
            let mut offsets = vec![(0.0, 0.0)];
            if x % 1.0 < 0.5 && x > 1.0 {
                offsets.push((0.5, 0.0));
            }
            if y % 1.0 < 0.5 && y > 1.0 {
                offsets.push((0.0, 0.5));
            }
            if xi % 1.0 < 0.5 && xi > 1.0 {
                offsets.push((-0.5, 0.0));
            }
            if yi % 1.0 < 0.5 && yi > 1.0 {
                offsets.push((0.0, -0.5));
            }
            for (ox, oy) in offsets {
                let gx = ((x - ox).floor().max(0.0) as usize).min(gw - 1);
                let gy = ((y - oy).floor().max(0.0) as usize).min(gh - 1);
                out.push(Assignment {
                    image: t.image,
                    anchor: a,
                    gy,
                    gx,
                    class: t.class,
                    tbox: [x - gx as f64, y - gy as f64, w, h],
                    anchor_wh: (aw, ah),
                });
            }
        }
    }
    out
}

/// Value with its gradient w.r.t. four inputs (forward-mode).
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: [0.0; 4] }
    }
    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Dual { v, d }
    }
    fn scale(self, k: f64, v: f64) -> Self {
        Dual {
            v,
            d: self.d.map(|x| x * k),
        }
    }
    fn min(self, o: Self) -> Self {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }
    fn max(self, o: Self) -> Self {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }
    fn relu(self) -> Self {
        if self.v > 0.0 {
            self
        } else {
            Dual::c(0.0)
        }
    }
    fn atan(self) -> Self {
        self.scale(1.0 / (1.0 + self.v * self.v), self.v.atan())
    }
    fn sq(self) -> Self {
        self * self
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Dual { v: self.v + o.v, d }
    }
}
impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        self + o.scale(-1.0, -o.v)
    }
}
impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; 4];
        for (i, x) in d.iter_mut().enumerate() {
            *x = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}
impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let mut d = [0.0; 4];
        for (i, x) in d.iter_mut().enumerate() {
            *x = (self.d[i] * o.v - self.v * o.d[i]) / (o.v * o.v);
        }
        Dual { v: self.v / o.v, d }
    }
}

const CIOU_EPS: f64 = 1e-7;

fn ciou_dual(p: [Dual; 4], t: [f64; 4]) -> Dual {
    let half = Dual::c(0.5);
    let eps = Dual::c(CIOU_EPS);
    let (px1, px2) = (p[0] - p[2] * half, p[0] + p[2] * half);
    let (py1, py2) = (p[1] - p[3] * half, p[1] + p[3] * half);
    let (tx1, tx2) = (Dual::c(t[0] - t[2] / 2.0), Dual::c(t[0] + t[2] / 2.0));
    let (ty1, ty2) = (Dual::c(t[1] - t[3] / 2.0), Dual::c(t[1] + t[3] / 2.0));
    let inter = (px2.min(tx2) - px1.max(tx1)).relu() * (py2.min(ty2) - py1.max(ty1)).relu();
    let (w1, h1) = (px2 - px1, py2 - py1 + eps);
    let (w2, h2) = (tx2 - tx1, ty2 - ty1 + eps);
    let union = w1 * h1 + w2 * h2 - inter + eps;
    let iou = inter / union;
    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let c2 = cw.sq() + ch.sq() + eps;
    let rho2 = ((tx1 + tx2 - px1 - px2).sq() + (ty1 + ty2 - py1 - py2).sq()) * Dual::c(0.25);
    let v = ((w2 / h2).atan() - (w1 / h1).atan()).sq() * Dual::c(4.0 / (PI * PI));
    let alpha = v / (v - iou + Dual::c(1.0 + CIOU_EPS));
    iou - (rho2 / c2 + v * alpha)
}

/// Complete IoU between center-format boxes `(x, y, w, h)`.
pub fn ciou(pred: [f64; 4], target: [f64; 4]) -> f64 {
    ciou_dual(pred.map(Dual::c), target).v
}

/// CIoU and its gradient w.r.t. the predicted box.
pub fn ciou_with_grad(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let p = [0, 1, 2, 3].map(|i| Dual::var(pred[i], i));
    let r = ciou_dual(p, target);
    (r.v, r.d)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `σ(z)` against `y`, computed from the logit.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Gains after rescaling by class count, scale count and input size.
pub fn scaled_gains(cfg: &LossConfig, num_classes: usize, image_size: usize) -> (f64, f64, f64) {
    let nl = 3.0 / 2.0;
    (
        cfg.box_gain * nl,
        cfg.obj_gain * (image_size as f64 / 640.0).powi(2) * nl,
        cfg.cls_gain * num_classes as f64 / 80.0 * nl,
    )
}

/// Total loss and gradients for raw maps at strides 8/16.
pub fn compute_loss<T: Real>(
    preds: &[Tensor<T>; 2],
    targets: &[Target],
    model: &ModelConfig,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    let no = model.outputs_per_anchor();
    let nc = model.num_classes;
    let (n, _, h3, w3) = preds[0].dims4()?;
    for (i, p) in preds.iter().enumerate() {
        let (pn, pc, ph, pw) = p.dims4()?;
        let s = model.strides[i] / model.strides[0];
        if pn != n || pc != ANCHORS_PER_SCALE * no || ph * s != h3 || pw * s != w3 {
            return Err(Error::invalid(
                "compute_loss",
                format!("prediction shapes {:?} / {:?} inconsistent with config", preds[0].shape(), preds[1].shape()),
            ));
        }
    }
    for t in targets {
        if t.image >= n || t.class >= nc || !(t.w > 0.0 && t.h > 0.0) {
            return Err(Error::invalid("compute_loss", format!("invalid target {t:?} for batch of {n}")));
        }
    }
    let (g_box, g_obj, g_cls) = scaled_gains(cfg, nc, w3 * model.strides[0]);
    let (mut lbox, mut lobj, mut lcls) = (0.0, 0.0, 0.0);
    let mut grads: Vec<Tensor<T>> = Vec::with_capacity(2);

    for (i, pred) in preds.iter().enumerate() {
        let (_, c, gh, gw) = pred.dims4()?;
        let hw = gh * gw;
        let raw = pred.data();
        let mut grad = vec![0.0f64; raw.len()];
        let idx = |b: usize, a: usize, j: usize, y: usize, x: usize| ((b * c + a * no + j) * gh + y) * gw + x;
        let assigned = build_targets(targets, &model.anchors[i], model.strides[i], (gh, gw), cfg.anchor_threshold);
        let mut tobj = vec![0.0f64; n * ANCHORS_PER_SCALE * hw];

        if !assigned.is_empty() {
            let inv_n = 1.0 / assigned.len() as f64;
            let inv_cls = 1.0 / (assigned.len() * nc) as f64;
            for m in &assigned {
                let at = |j| idx(m.image, m.anchor, j, m.gy, m.gx);
                let s: Vec<f64> = (0..4).map(|j| sigmoid(raw[at(j)].to_f64())).collect();
                let pbox = [
                    2.0 * s[0] - 0.5,
                    2.0 * s[1] - 0.5,
                    4.0 * s[2] * s[2] * m.anchor_wh.0,
                    4.0 * s[3] * s[3] * m.anchor_wh.1,
                ];
                let dbox = [
                    2.0 * s[0] * (1.0 - s[0]),
                    2.0 * s[1] * (1.0 - s[1]),
                    8.0 * s[2] * s[2] * (1.0 - s[2]) * m.anchor_wh.0,
                    8.0 * s[3] * s[3] * (1.0 - s[3]) * m.anchor_wh.1,
                ];
                let (iou, d_iou) = ciou_with_grad(pbox, m.tbox);
                lbox += (1.0 - iou) * inv_n;
                for j in 0..4 {
                    grad[at(j)] -= g_box * inv_n * d_iou[j] * dbox[j];
                }
                tobj[(m.image * ANCHORS_PER_SCALE + m.anchor) * hw + m.gy * gw + m.gx] =
                    (1.0 - cfg.iou_ratio) + cfg.iou_ratio * iou.max(0.0);
                for k in 0..nc {
                    let z = raw[at(5 + k)].to_f64();
                    let y = if k == m.class { 1.0 } else { 0.0 };
                    lcls += bce_with_logits(z, y) * inv_cls;
                    grad[at(5 + k)] += g_cls * inv_cls * (sigmoid(z) - y);
                }
            }
        }

        let count = tobj.len() as f64;
        let w = cfg.balance[i] / count;
        let mut scale_obj = 0.0;
        for b in 0..n {
            for a in 0..ANCHORS_PER_SCALE {
                for p in 0..hw {
                    let k = idx(b, a, 4, 0, 0) + p;
                    let z = raw[k].to_f64();
                    let y = tobj[(b * ANCHORS_PER_SCALE + a) * hw + p];
                    scale_obj += bce_with_logits(z, y);
                    grad[k] += g_obj * w * (sigmoid(z) - y);
                }
            }
        }
        lobj += scale_obj * w;
        grads.push(Tensor::from_vec(pred.shape(), grad.into_iter().map(T::from_f64).collect())?);
    }

    let (box_loss, obj_loss, cls_loss) = (g_box * lbox, g_obj * lobj, g_cls * lcls);
    let g1 = grads.pop().unwrap();
    let g0 = grads.pop().unwrap();
    Ok(LossOutput {
        total: box_loss + obj_loss + cls_loss,
        box_loss,
        obj_loss,
        cls_loss,
        grads: [g0, g1],
    })
}
