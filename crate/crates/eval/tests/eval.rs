use kfg_core::{Model, ModelConfig};
use kfg_eval::boxes::as_detections;
use kfg_eval::eval::{evaluate_detections, evaluate_model, EvalConfig};
use kfg_eval::synth::synth_fixtures;
use kfg_eval::{BBox, Detection, GroundTruth};

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let samples = synth_fixtures(16, 1);
    let images: Vec<_> = samples.iter().map(|s| (as_detections(&s.gts), s.gts.clone())).collect();
    let r = evaluate_detections(&images, 3, 0.5);
    assert_eq!((r.map50, r.precision, r.recall, r.fp, r.fn_), (1.0, 1.0, 1.0, 0, 0));
    assert_eq!(r.tp, samples.iter().map(|s| s.gts.len()).sum::<usize>());
}

#[test]
fn absent_classes_are_excluded_and_reported() {
    let g = GroundTruth {
        bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
        class: 0,
    };
    let stray = Detection {
        bbox: BBox::new(30.0, 30.0, 40.0, 40.0),
        class: 2,
        confidence: 0.9,
    };
    let mut dets = as_detections(&[g]);
    dets.push(stray);
    let r = evaluate_detections(&[(dets, vec![g])], 3, 0.5);
    assert_eq!(r.map50, 1.0);
    assert_eq!(r.absent_classes(), vec![1, 2]);
    assert_eq!(r.fp, 1);
    assert!(r.per_class[2].degenerate);
    assert!(r.key_values().contains("map50=1.000000"));
    assert!(r.table().contains("no ground truth"));
}

#[test]
fn map_is_invariant_to_class_relabeling() {
    let samples = synth_fixtures(12, 4);
    let perm = [2, 0, 1];
    let make = |relabel: bool| -> Vec<(Vec<Detection>, Vec<GroundTruth>)> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let map = |c: usize| if relabel { perm[c] } else { c };
                let gts: Vec<GroundTruth> = s.gts.iter().map(|g| GroundTruth { class: map(g.class), ..*g }).collect();
                // Imperfect detections: shifted boxes, one missed, one spurious.
                let mut dets: Vec<Detection> = gts
                    .iter()
                    .enumerate()
                    .skip(i % 2)
                    .map(|(k, g)| Detection {
                        bbox: BBox::new(g.bbox.x1 + k as f32, g.bbox.y1, g.bbox.x2 + k as f32, g.bbox.y2),
                        class: g.class,
                        confidence: 0.3 + 0.05 * ((i * 7 + k) % 11) as f32,
                    })
                    .collect();
                dets.push(Detection {
                    bbox: BBox::new(0.0, 0.0, 5.0, 5.0),
                    class: map(i % 3),
                    confidence: 0.5,
                });
                (dets, gts)
            })
            .collect()
    };
    let a = evaluate_detections(&make(false), 3, 0.5);
    let b = evaluate_detections(&make(true), 3, 0.5);
    assert_eq!(a.map50, b.map50);
    assert!(a.map50 > 0.0 && a.map50 < 1.0);
    for c in &a.per_class {
        for r in [&a.precision, &a.recall, &c.precision, &c.recall, &c.ap] {
            assert!((0.0..=1.0).contains(r));
        }
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let model = Model::build(&ModelConfig::tiny("kfg").unwrap(), 0).unwrap();
    let samples = synth_fixtures(5, 2);
    let cfg = EvalConfig {
        conf: 0.0,
        ..EvalConfig::default()
    };
    let one = evaluate_model(&model, &samples, cfg).unwrap();
    let three = evaluate_model(&model, &samples, EvalConfig { workers: 3, ..cfg }).unwrap();
    assert_eq!(one, three);
    assert!(one.fp > 0, "an untrained model at conf 0 must emit detections");
    assert_eq!(one.params, Some(model.audit().dedup_total));
}
