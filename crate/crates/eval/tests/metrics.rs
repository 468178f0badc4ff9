use kfg_eval::metrics::{average_precision, map50, match_detections, precision_recall};
use kfg_eval::nms::{nms, nms_indices};
use kfg_eval::oracle::{ap_staircase_exact, nms_reference};
use kfg_eval::{iou, BBox, Detection, GroundTruth};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn det(b: [f32; 4], class: usize, confidence: f32) -> Detection {
    Detection {
        bbox: BBox::new(b[0], b[1], b[2], b[3]),
        class,
        confidence,
    }
}

fn gt(b: [f32; 4], class: usize) -> GroundTruth {
    GroundTruth {
        bbox: BBox::new(b[0], b[1], b[2], b[3]),
        class,
    }
}

#[test]
fn iou_examples() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
    assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-7);
    assert_eq!(iou(&a, &BBox::new(2.0, 0.0, 4.0, 2.0)), 0.0, "touching edges");
    let dot = BBox::new(1.0, 1.0, 1.0, 1.0);
    assert_eq!(iou(&dot, &dot), 0.0);
}

#[test]
fn nms_examples() {
    let a = det([0.0, 0.0, 10.0, 10.0], 0, 0.9);
    let b = det([0.0, 0.0, 10.0, 9.0], 0, 0.8);
    assert!(iou(&a.bbox, &b.bbox) >= 0.9 - 1e-6);
    assert_eq!(nms(&[b, a], 0.5), vec![a]);
    let c = Detection { class: 1, ..b };
    assert_eq!(nms(&[a, c], 0.5), vec![a, c]);
    // Equal scores: the lower index wins.
    let d = Detection { confidence: 0.9, ..b };
    assert_eq!(nms_indices(&[d, a], 0.5), vec![0]);
    assert!(nms(&[], 0.5).is_empty());
}

#[test]
fn match_examples() {
    let g = [gt([0.0, 0.0, 10.0, 10.0], 0), gt([20.0, 20.0, 30.0, 30.0], 1)];
    let perfect: Vec<Detection> = g.iter().map(|g| Detection { bbox: g.bbox, class: g.class, confidence: 0.9 }).collect();
    let m = match_detections(&perfect, &g, 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));

    let two = [det([0.0, 0.0, 10.0, 10.0], 0, 0.9), det([0.0, 0.0, 10.0, 9.0], 0, 0.8)];
    let m = match_detections(&two, &g[..1], 0.5);
    assert_eq!((m.tp, m.fp, m.fn_, m.flags.clone()), (1, 1, 0, vec![true, false]));

    let wrong = [det([0.0, 0.0, 10.0, 10.0], 1, 0.9)];
    let m = match_detections(&wrong, &g[..1], 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));

    // A detection takes the better-overlapping of two ground truths.
    let gs = [gt([0.0, 0.0, 10.0, 10.0], 0), gt([2.0, 0.0, 12.0, 10.0], 0)];
    let m = match_detections(&[det([2.0, 0.0, 12.0, 10.0], 0, 0.5), det([0.0, 0.0, 10.0, 10.0], 0, 0.4)], &gs, 0.5);
    assert_eq!(m.flags, vec![true, true]);
}

#[test]
fn precision_recall_formulas_on_count_grid() {
    for tp in 0..12usize {
        for fp in 0..12usize {
            for fn_ in 0..12usize {
                let r = precision_recall(tp, fp, fn_);
                let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
                let rc = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
                assert_eq!((r.precision, r.recall), (p, rc));
                assert_eq!(r.degenerate, tp + fp == 0 || tp + fn_ == 0);
            }
        }
    }
    assert_eq!(precision_recall(9, 1, 0).precision, 0.9);
    assert_eq!(precision_recall(9, 0, 1).recall, 0.9);
    let z = precision_recall(0, 0, 0);
    assert!(z.degenerate && z.precision == 0.0 && z.recall == 0.0);
}

#[test]
fn average_precision_examples() {
    assert_eq!(average_precision(&[true, true, true], 3), 1.0);
    assert!((average_precision(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    assert_eq!(average_precision(&[false, false], 2), 0.0);
    assert_eq!(average_precision(&[], 2), 0.0);
    assert_eq!(average_precision(&[true], 0), 0.0);
    assert_eq!(average_precision(&[true], 4), 0.25);
    assert_eq!(map50(&[(1.0, 3), (0.5, 2)]), Some(0.75));
    assert_eq!(map50(&[(1.0, 3), (0.0, 0), (0.5, 2)]), Some(0.75), "classes without ground truth are excluded");
    assert_eq!(map50(&[(0.0, 0)]), None);
}

fn ap_matches_oracle(flags: &[bool], n_gt: usize) -> bool {
    let (num, den) = ap_staircase_exact(flags, n_gt);
    let exact = num as f64 / den as f64;
    (average_precision(flags, n_gt) - exact).abs() <= 1e-12
}

#[test]
fn average_precision_equals_staircase_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n_gt = rng.random_range(1..=10);
        let n = rng.random_range(0..=20);
        let mut left = n_gt;
        let flags: Vec<bool> = (0..n)
            .map(|_| {
                let tp = left > 0 && rng.random_bool(0.5);
                left -= usize::from(tp);
                tp
            })
            .collect();
        assert!(ap_matches_oracle(&flags, n_gt), "{flags:?} n_gt={n_gt}");
    }
}

fn arb_dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    // Coarse coordinates and scores make exact ties and duplicate boxes common.
    prop::collection::vec((0u8..6, 0u8..6, 1u8..5, 1u8..5, 0usize..3, 0u8..5), 0..=max).prop_map(|v| {
        v.into_iter()
            .map(|(x, y, w, h, c, s)| {
                let (x, y) = (f32::from(x) * 2.0, f32::from(y) * 2.0);
                det([x, y, x + f32::from(w) * 3.0, y + f32::from(h) * 3.0], c, f32::from(s) / 4.0)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn nms_equals_reference(dets in arb_dets(50), t in prop::sample::select(vec![0.0f32, 0.3, 0.5, 0.7, 1.0])) {
        prop_assert_eq!(nms_indices(&dets, t), nms_reference(&dets, t));
    }

    #[test]
    fn nms_is_an_idempotent_subset(dets in arb_dets(30)) {
        let once = nms(&dets, 0.5);
        prop_assert!(once.iter().all(|d| dets.contains(d)));
        prop_assert_eq!(nms(&once, 0.5), once);
    }

    #[test]
    fn match_conserves_counts(dets in arb_dets(20), gts in arb_dets(10), t in 0.1f32..0.9) {
        let gts: Vec<GroundTruth> = gts.iter().map(|d| GroundTruth { bbox: d.bbox, class: d.class }).collect();
        let m = match_detections(&dets, &gts, t);
        prop_assert_eq!(m.tp + m.fn_, gts.len());
        prop_assert_eq!(m.tp + m.fp, dets.len());
        prop_assert_eq!(m.flags.len(), dets.len());
    }

    #[test]
    fn ap_is_a_rate(flags in prop::collection::vec(any::<bool>(), 0..20), extra in 0usize..5) {
        let n_gt = flags.iter().filter(|&&f| f).count() + extra;
        let ap = average_precision(&flags, n_gt);
        prop_assert!((0.0..=1.0).contains(&ap));
        if n_gt > 0 {
            prop_assert!(ap_matches_oracle(&flags, n_gt));
        }
    }
}
