use super::boxes::{iou, Detection};

/// Greedy non-maximum suppression. Detections are visited by descending score
/// (ties in input order); a detection is suppressed when its IoU with an
/// already kept one of the same class (any class if `class_agnostic`) exceeds
/// `iou_threshold`. Returns indices into `dets` in output order.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64, class_agnostic: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let clash = kept.iter().any(|&k| {
            (class_agnostic || dets[k].class_id == d.class_id) && iou(&dets[k].bbox, &d.bbox) > iou_threshold
        });
        if !clash {
            kept.push(i);
        }
    }
    kept
}

/// Per-class NMS; output sorted by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold, false).into_iter().map(|i| dets[i]).collect()
}
