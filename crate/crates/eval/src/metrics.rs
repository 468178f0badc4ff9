//! Matching, precision/recall and average precision.

use crate::boxes::{iou, Detection, GroundTruth};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// True-positive flag per detection, in input order.
    pub flags: Vec<bool>,
}

/// Greedy matching of `dets` (sorted by descending confidence) to `gts`.
/// Each detection takes the unmatched same-class ground truth with the
/// highest IoU at or above `iou_thresh`; ties go to the lower index.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f32) -> MatchResult {
    let mut matched = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f32)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] || g.class != d.class {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = true;
        }
        flags.push(best.is_some());
    }
    let tp = flags.iter().filter(|&&f| f).count();
    MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        flags,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Set when a ratio was 0/0 and reported as 0.
    pub degenerate: bool,
}

pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> PrecisionRecall {
    let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    PrecisionRecall {
        precision: p.unwrap_or(0.0),
        recall: r.unwrap_or(0.0),
        degenerate: p.is_none() || r.is_none(),
    }
}

/// All-point interpolated AP of detections ranked by descending confidence,
/// given their true-positive flags and the number of ground-truth boxes.
/// Returns 0 when `n_gt` is 0.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Precision envelope: running maximum from the right.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    // Recall only moves at true positives, each by 1 / n_gt.
    let area: f64 = flags
        .iter()
        .zip(&precision)
        .filter(|(&f, _)| f)
        .map(|(_, &p)| p)
        .sum();
    area / n_gt as f64
}

/// Mean of the APs of classes that have ground truth. `None` when no class
/// does.
pub fn map50(per_class: &[(f64, usize)]) -> Option<f64> {
    let present: Vec<f64> = per_class.iter().filter(|(_, n)| *n > 0).map(|(ap, _)| *ap).collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}
