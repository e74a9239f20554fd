use super::boxes::{iou, Detection, GroundTruth};

/// Operating point for precision and recall.
pub const CONF_THRESHOLD: f64 = 0.15;
pub const NMS_IOU_THRESHOLD: f64 = 0.45;
pub const MATCH_IOU_THRESHOLD: f64 = 0.5;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Counts for one image at the operating point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ImageMatches {
    pub image: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// Absent when no detection reaches the operating confidence.
    pub precision: Option<f64>,
    /// Absent when there are no ground truths.
    pub recall: Option<f64>,
    /// `(iou threshold, mAP over classes)`; the mAP is absent without ground truths.
    pub ap_per_threshold: Vec<(f64, Option<f64>)>,
    pub map50: Option<f64>,
    pub map50_95: Option<f64>,
    pub per_image: Vec<ImageMatches>,
}

/// Score-descending greedy matching of one class. Each detection takes the
/// unmatched ground truth of its image with the highest IoU and is a true
/// positive when that IoU reaches `iou_threshold`. Ties in score keep
/// image-major input order. Returns `(image, score, is_tp)` in visiting order
/// and the number of ground truths.
fn match_class(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class_id: usize,
    iou_threshold: f64,
    min_score: f64,
) -> (Vec<(usize, f64, bool)>, usize) {
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(im, d)| {
            d.iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class_id && d.score >= min_score)
                .map(move |(k, _)| (im, k))
        })
        .collect();
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut npos = 0;
    for g in gts {
        npos += g.iter().filter(|g| g.class_id == class_id).count();
    }
    let mut out = Vec::with_capacity(order.len());
    for (im, k) in order {
        let d = &dets[im][k];
        let mut best: Option<(usize, f64)> = None;
        if let Some(g) = gts.get(im) {
            for (j, gt) in g.iter().enumerate() {
                if gt.class_id != class_id || used[im][j] {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
        }
        let tp = match best {
            Some((j, v)) if v >= iou_threshold => {
                used[im][j] = true;
                true
            }
            _ => false,
        };
        out.push((im, d.score, tp));
    }
    (out, npos)
}

/// Area under the all-points precision envelope.
fn envelope_area(hits: &[(usize, f64, bool)], npos: usize) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![1.0];
    let (mut tp, mut fp) = (0.0, 0.0);
    for &(_, _, hit) in hits {
        if hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        rec.push(tp / npos as f64);
        prec.push(tp / (tp + fp));
    }
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum()
}

/// Average precision of one class over a dataset (`dets[i]`, `gts[i]` belong
/// to image `i`). `None` when the class has no ground truth.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class_id: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let (hits, npos) = match_class(dets, gts, class_id, iou_threshold, f64::NEG_INFINITY);
    (npos > 0).then(|| envelope_area(&hits, npos))
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// AP at IoU 0.50:0.05:0.95 averaged over classes that have ground truths, plus
/// precision and recall at confidence [`CONF_THRESHOLD`] and IoU
/// [`MATCH_IOU_THRESHOLD`].
pub fn map_range(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize) -> EvalResult {
    map_range_at(dets, gts, num_classes, CONF_THRESHOLD)
}

/// [`map_range`] with precision and recall taken at confidence `conf`.
pub fn map_range_at(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize, conf: f64) -> EvalResult {
    let ap_per_threshold: Vec<(f64, Option<f64>)> = iou_thresholds()
        .into_iter()
        .map(|t| {
            let aps = (0..num_classes).filter_map(|c| average_precision(dets, gts, c, t));
            (t, mean(aps))
        })
        .collect();
    let map50 = ap_per_threshold[0].1;
    let map50_95 = map50.map(|_| mean(ap_per_threshold.iter().filter_map(|x| x.1)).unwrap_or(0.0));

    let images = dets.len().max(gts.len());
    let mut per_image: Vec<ImageMatches> = (0..images)
        .map(|image| ImageMatches {
            image,
            ..Default::default()
        })
        .collect();
    let mut total_gt = 0;
    for c in 0..num_classes {
        let (hits, npos) = match_class(dets, gts, c, MATCH_IOU_THRESHOLD, conf);
        total_gt += npos;
        for (im, _, tp) in hits {
            if tp {
                per_image[im].true_positives += 1;
            } else {
                per_image[im].false_positives += 1;
            }
        }
    }
    for (im, m) in per_image.iter_mut().enumerate() {
        let n = gts.get(im).map_or(0, |g| g.iter().filter(|g| g.class_id < num_classes).count());
        m.false_negatives = n - m.true_positives;
    }
    let tp: usize = per_image.iter().map(|m| m.true_positives).sum();
    let fp: usize = per_image.iter().map(|m| m.false_positives).sum();
    EvalResult {
        precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
        recall: (total_gt > 0).then(|| tp as f64 / total_gt as f64),
        ap_per_threshold,
        map50,
        map50_95,
        per_image,
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |v| format!("{v:.6}"))
}

impl EvalResult {
    /// Line-oriented `key=value` records.
    pub fn to_records(&self) -> String {
        let tp: usize = self.per_image.iter().map(|m| m.true_positives).sum();
        let fp: usize = self.per_image.iter().map(|m| m.false_positives).sum();
        let fn_: usize = self.per_image.iter().map(|m| m.false_negatives).sum();
        let mut s = format!(
            "precision={}\nrecall={}\nmap50={}\nmap50_95={}\ntp={tp}\nfp={fp}\nfn={fn_}\nimages={}\n",
            fmt(self.precision),
            fmt(self.recall),
            fmt(self.map50),
            fmt(self.map50_95),
            self.per_image.len()
        );
        for (t, ap) in &self.ap_per_threshold {
            s.push_str(&format!("ap@{t:.2}={}\n", fmt(*ap)));
        }
        s
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "   -".to_string(), |v| format!("{:6.2}", 100.0 * v));
        let mut s = String::new();
        s.push_str("metric            value/%\n");
        s.push_str(&format!("precision         {}\n", pct(self.precision)));
        s.push_str(&format!("recall            {}\n", pct(self.recall)));
        s.push_str(&format!("mAP@0.5           {}\n", pct(self.map50)));
        s.push_str(&format!("mAP@0.5:0.95      {}\n", pct(self.map50_95)));
        s
    }
}
