//! Decoding raw maps to boxes, NMS, and precision/recall/mAP evaluation.

mod bench;
mod boxes;
mod decode;
mod metrics;
mod nms;

pub use bench::{fps_benchmark, FpsReport};
pub use boxes::{iou, BBox, Detection, GroundTruth};
pub use decode::decode;
pub use metrics::{
    average_precision, iou_thresholds, map_range, map_range_at, EvalResult, ImageMatches, CONF_THRESHOLD, MATCH_IOU_THRESHOLD,
    NMS_IOU_THRESHOLD,
};
pub use nms::{nms, nms_indices};
