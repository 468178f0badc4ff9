//! Per-class greedy non-maximum suppression.

use std::cmp::Ordering;

use crate::boxes::{iou, Detection};

/// Descending confidence, then ascending original index.
fn rank(dets: &[Detection], a: usize, b: usize) -> Ordering {
    dets[b]
        .confidence
        .total_cmp(&dets[a].confidence)
        .then(a.cmp(&b))
}

/// Indices of the detections that survive, in rank order. A box is dropped
/// when it overlaps an already kept box of the same class with IoU above
/// `iou_thresh`.
pub fn nms_indices(dets: &[Detection], iou_thresh: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank(dets, a, b));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let clash = kept
            .iter()
            .any(|&k| dets[k].class == d.class && iou(&dets[k].bbox, &d.bbox) > iou_thresh);
        if !clash {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    nms_indices(dets, iou_thresh).into_iter().map(|i| dets[i]).collect()
}
