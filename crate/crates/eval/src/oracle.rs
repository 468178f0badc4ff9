//! Slow reference implementations used to cross-check the fast paths.

use crate::boxes::{iou, Detection};

/// NMS by repeated global selection: take the best remaining detection
/// (highest confidence, lowest index), keep it, delete every remaining
/// same-class box that overlaps it above the threshold, repeat.
pub fn nms_reference(dets: &[Detection], iou_thresh: f32) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for (pos, &i) in alive.iter().enumerate() {
            let b = alive[best];
            let better = dets[i].confidence > dets[b].confidence
                || (dets[i].confidence == dets[b].confidence && i < b);
            if better {
                best = pos;
            }
        }
        let k = alive.remove(best);
        kept.push(k);
        alive.retain(|&i| !(dets[i].class == dets[k].class && iou(&dets[i].bbox, &dets[k].bbox) > iou_thresh));
    }
    kept
}

/// Least common multiple of 1..=20: every precision `tp / k` with `k <= 20`
/// is an integer multiple of `1 / LCM`.
const LCM: u64 = 232_792_560;

/// Exact all-point AP for at most 20 ranked detections, from the full
/// precision/recall staircase in integer arithmetic. Returns the value as
/// `numerator / denominator`.
pub fn ap_staircase_exact(flags: &[bool], n_gt: usize) -> (u64, u64) {
    assert!(flags.len() <= 20, "exact oracle supports at most 20 detections");
    if n_gt == 0 {
        return (0, 1);
    }
    // Points of the staircase as (tp, rank) pairs.
    let mut points = Vec::new();
    let mut tp = 0u64;
    for (k, &f) in flags.iter().enumerate() {
        tp += u64::from(f);
        points.push((tp, k as u64 + 1));
    }
    let mut num = 0u64;
    let mut prev_tp = 0u64;
    for (i, &(tp_i, _)) in points.iter().enumerate() {
        if tp_i == prev_tp {
            continue;
        }
        // Interpolated precision: best precision at this recall or beyond.
        let best = points[i..]
            .iter()
            .map(|&(t, k)| t * (LCM / k))
            .max()
            .expect("non-empty tail");
        num += (tp_i - prev_tp) * best;
        prev_tp = tp_i;
    }
    (num, LCM * n_gt as u64)
}
