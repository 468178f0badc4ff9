mod common;

use common::uniform;
use kfg_core::loss::{assign, best_level, ciou, detection_loss, ltrb_targets, LossWeights, Target};
use kfg_core::nn::LevelOut;
use kfg_core::train::{train_step, Sgd};
use kfg_core::{Model, ModelConfig};
use kfg_tensor::{grad_check_with, GradCheckConfig, Graph, Tensor};
use proptest::prelude::*;

const GRIDS: [(usize, usize, usize); 3] = [(8, 8, 8), (4, 4, 16), (2, 2, 32)];

/// Scalar CIoU written directly from its definition. `alpha` overrides the
/// aspect trade-off weight, which the graph version holds constant.
fn ciou_ref(p: [f64; 4], t: [f64; 4], alpha: Option<f64>) -> (f64, f64) {
    let eps = 1e-7;
    let (w1, h1) = (p[2] - p[0], p[3] - p[1] + eps);
    let (w2, h2) = (t[2] - t[0], t[3] - t[1] + eps);
    let iw = (p[2].min(t[2]) - p[0].max(t[0])).max(0.0);
    let ih = (p[3].min(t[3]) - p[1].max(t[1])).max(0.0);
    let inter = iw * ih;
    let iou = inter / (w1 * h1 + w2 * h2 - inter + eps);
    let cw = p[2].max(t[2]) - p[0].min(t[0]);
    let ch = p[3].max(t[3]) - p[1].min(t[1]);
    let c2 = cw * cw + ch * ch + eps;
    let rho2 = ((t[0] + t[2] - p[0] - p[2]).powi(2) + (t[1] + t[3] - p[1] - p[3]).powi(2)) / 4.0;
    let v = 4.0 / std::f64::consts::PI.powi(2) * ((w2 / h2).atan() - (w1 / h1).atan()).powi(2);
    let a = alpha.unwrap_or(v / (v - iou + 1.0 + eps));
    (iou - rho2 / c2 - a * v, a)
}

fn graph_ciou(p: &[[f64; 4]], t: &[[f64; 4]]) -> (Vec<f64>, Vec<[f64; 4]>) {
    let mut g = Graph::<f64>::new();
    let cols = [0, 1, 2, 3].map(|k| {
        let data = p.iter().map(|b| b[k]).collect();
        g.leaf(Tensor::new([p.len(), 1], data).unwrap(), true)
    });
    let c = ciou(&mut g, cols, t).unwrap();
    let vals = g.value(c).data().to_vec();
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    let per: Vec<Tensor<f64>> = cols.iter().map(|&v| grads.get(v).unwrap()).collect();
    let grads = (0..p.len()).map(|i| [0, 1, 2, 3].map(|k| per[k].data()[i])).collect();
    (vals, grads)
}

fn random_box(r: &[f64]) -> [f64; 4] {
    let (x, y) = (r[0].abs() * 10.0, r[1].abs() * 10.0);
    [x, y, x + 0.5 + r[2].abs() * 6.0, y + 0.5 + r[3].abs() * 6.0]
}

#[test]
fn ciou_of_identical_boxes_is_one() {
    let b = [[1.0, 2.0, 5.0, 4.0], [0.0, 0.0, 3.0, 9.0]];
    let (vals, _) = graph_ciou(&b, &b);
    for v in vals {
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }
}

#[test]
fn ciou_matches_scalar_reference() {
    let r = uniform::<f64>(&[64, 8], 1);
    let mut p = Vec::new();
    let mut t = Vec::new();
    for row in r.data().chunks(8) {
        p.push(random_box(&row[..4]));
        t.push(random_box(&row[4..]));
    }
    let (vals, grads) = graph_ciou(&p, &t);
    for i in 0..p.len() {
        let (want, alpha) = ciou_ref(p[i], t[i], None);
        assert!((vals[i] - want).abs() < 1e-9, "box {i}");
        // Gradient with the trade-off weight frozen at its current value.
        for k in 0..4 {
            let h = 1e-6;
            let (mut hi, mut lo) = (p[i], p[i]);
            hi[k] += h;
            lo[k] -= h;
            let num = (ciou_ref(hi, t[i], Some(alpha)).0 - ciou_ref(lo, t[i], Some(alpha)).0) / (2.0 * h);
            assert!((grads[i][k] - num).abs() <= 1e-6 * num.abs().max(1.0), "box {i} coord {k}");
        }
    }
}

#[test]
fn level_follows_box_size() {
    let s = [8, 16, 32];
    assert_eq!(best_level(32.0, &s), 0);
    assert_eq!(best_level(64.0, &s), 1);
    assert_eq!(best_level(128.0, &s), 2);
    assert_eq!(best_level(2.0, &s), 0);
    assert_eq!(best_level(5000.0, &s), 2);
    assert_eq!(best_level(40.0, &s), 0);
    assert_eq!(best_level(50.0, &s), 1);
}

#[test]
fn assignment_uses_the_center_cell() {
    let t = Target {
        class: 2,
        bbox: [10.0, 20.0, 40.0, 44.0],
    };
    let (a, conflicts) = assign(&[vec![t]], &GRIDS);
    assert_eq!(conflicts, 0);
    assert_eq!((a[0].level, a[0].row, a[0].col, a[0].class), (0, 4, 3, 2));
    assert_eq!(a[0].grid_box, [1.25, 2.5, 5.0, 5.5]);
    let d = ltrb_targets(&a[0], 16);
    for (got, want) in d.iter().zip([2.25, 2.0, 1.5, 1.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn distances_are_clamped_to_the_bin_range() {
    let t = Target {
        class: 0,
        bbox: [0.0, 0.0, 64.0, 64.0],
    };
    let (a, _) = assign(&[vec![t]], &GRIDS);
    let d = ltrb_targets(&a[0], 2);
    assert!(d.iter().all(|&v| (0.0..1.0).contains(&v)));
}

#[test]
fn collisions_are_counted_not_fatal() {
    let t = Target {
        class: 0,
        bbox: [8.0, 8.0, 24.0, 24.0],
    };
    let u = Target { class: 1, ..t };
    let (a, conflicts) = assign(&[vec![t, u], vec![t]], &GRIDS);
    assert_eq!((a.len(), conflicts), (2, 1));

    let mut g = Graph::<f64>::new();
    let outs = constant_outputs(&mut g, 2, 3, 16, 0.0);
    let parts = detection_loss(&mut g, &outs, &[vec![t, u], vec![t]], 16, LossWeights::default()).unwrap();
    assert_eq!((parts.assigned, parts.unassigned), (2, 1));
    assert!(parts.total_value.is_finite());
}

fn constant_outputs(g: &mut Graph<f64>, n: usize, nc: usize, reg_max: usize, v: f64) -> Vec<LevelOut> {
    GRIDS
        .iter()
        .map(|&(h, w, stride)| LevelOut {
            reg: g.leaf(Tensor::full([n, 4 * reg_max, h, w], v), true),
            cls: g.leaf(Tensor::full([n, nc, h, w], v), true),
            stride,
        })
        .collect()
}

#[test]
fn perfect_prediction_leaves_only_distribution_entropy() {
    let reg_max = 16;
    let t = Target {
        class: 1,
        bbox: [13.0, 9.0, 45.0, 33.0],
    };
    let (a, _) = assign(&[vec![t]], &GRIDS);
    let a = a[0];
    let (h, w, _) = GRIDS[a.level];
    let mut outs_data = Vec::new();
    for (l, &(gh, gw, _)) in GRIDS.iter().enumerate() {
        let r = Tensor::<f64>::zeros([1, 4 * reg_max, gh, gw]);
        let mut c = Tensor::<f64>::full([1, 3, gh, gw], -40.0);
        if l == a.level {
            c.set(&[0, 1, a.row, a.col], 40.0);
        }
        outs_data.push((r, c));
    }
    // Logits that put exactly the two-bin target mass on each side.
    let dist = ltrb_targets(&a, reg_max);
    let mut entropy = 0.0;
    for (k, d) in dist.iter().enumerate() {
        let left = d.floor() as usize;
        let (wl, wr) = (left as f64 + 1.0 - d, d - left as f64);
        for b in 0..reg_max {
            let p = if b == left { wl } else if b == left + 1 { wr } else { 0.0 };
            outs_data[a.level].0.set(&[0, k * reg_max + b, a.row, a.col], p.max(1e-300).ln());
        }
        entropy -= [wl, wr].iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    }
    assert!(h > a.row && w > a.col);

    let mut g = Graph::<f64>::new();
    let outs: Vec<LevelOut> = outs_data
        .into_iter()
        .zip(GRIDS)
        .map(|((r, c), (_, _, stride))| LevelOut {
            reg: g.constant(r),
            cls: g.constant(c),
            stride,
        })
        .collect();
    let parts = detection_loss(&mut g, &outs, &[vec![t]], reg_max, LossWeights::default()).unwrap();
    assert!(parts.box_loss.abs() < 1e-6, "box {}", parts.box_loss);
    assert!(parts.cls_loss < 1e-12, "cls {}", parts.cls_loss);
    assert!((parts.dfl_loss - entropy / 4.0).abs() < 1e-9, "dfl {} vs {}", parts.dfl_loss, entropy / 4.0);
}

#[test]
fn weights_scale_the_components() {
    let targets = vec![vec![
        Target {
            class: 0,
            bbox: [4.0, 4.0, 30.0, 20.0],
        },
        Target {
            class: 2,
            bbox: [2.0, 30.0, 60.0, 62.0],
        },
    ]];
    let mut g = Graph::<f64>::new();
    let outs = constant_outputs(&mut g, 1, 3, 16, 0.1);
    let w = LossWeights {
        box_: 2.0,
        cls: 3.0,
        dfl: 5.0,
    };
    let p = detection_loss(&mut g, &outs, &targets, 16, w).unwrap();
    let want = 2.0 * p.box_loss + 3.0 * p.cls_loss + 5.0 * p.dfl_loss;
    assert!((p.total_value - want).abs() < 1e-9);
    // Constant logits: every cell contributes the same BCE.
    let cells: usize = GRIDS.iter().map(|g| g.0 * g.1 * 3).sum();
    let bce_neg = (1.0 + 0.1f64.exp()).ln();
    let bce_pos = (1.0 + (-0.1f64).exp()).ln();
    let cls = ((cells - 2) as f64 * bce_neg + 2.0 * bce_pos) / 2.0;
    assert!((p.cls_loss - cls).abs() < 1e-9);
}

#[test]
fn classification_and_distribution_terms_pass_gradient_check() {
    let targets = vec![
        vec![Target {
            class: 1,
            bbox: [4.0, 4.0, 30.0, 20.0],
        }],
        vec![
            Target {
                class: 0,
                bbox: [10.0, 12.0, 50.0, 60.0],
            },
            Target {
                class: 2,
                bbox: [40.0, 40.0, 48.0, 46.0],
            },
        ],
    ];
    let reg_max = 8;
    let mut inputs = Vec::new();
    for (i, &(h, w, _)) in GRIDS.iter().enumerate() {
        inputs.push(uniform::<f64>(&[2, 4 * reg_max, h, w], 10 + i as u64));
        inputs.push(uniform::<f64>(&[2, 3, h, w], 20 + i as u64));
    }
    // The box term holds its aspect weight constant, so it is checked
    // separately against the scalar reference.
    let weights = LossWeights {
        box_: 0.0,
        ..LossWeights::default()
    };
    let r = grad_check_with(
        |g, v| {
            let outs: Vec<LevelOut> = GRIDS
                .iter()
                .enumerate()
                .map(|(i, &(_, _, stride))| LevelOut {
                    reg: v[2 * i],
                    cls: v[2 * i + 1],
                    stride,
                })
                .collect();
            Ok(detection_loss(g, &outs, &targets, reg_max, weights).expect("loss").total)
        },
        &inputs,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn overfitting_one_image_decreases_loss() {
    let mut model = Model::build(&ModelConfig::tiny("kfg").unwrap(), 3).unwrap();
    let x = uniform::<f32>(&[1, 3, 64, 64], 4).map(|v| v.abs());
    let targets = vec![vec![
        Target {
            class: 0,
            bbox: [6.0, 8.0, 30.0, 26.0],
        },
        Target {
            class: 2,
            bbox: [30.0, 20.0, 60.0, 60.0],
        },
    ]];
    let mut opt = Sgd::plain(0.01);
    let losses: Vec<f64> = (0..30)
        .map(|_| train_step(&mut model, &mut opt, &x, &targets).unwrap().loss)
        .collect();
    let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(down * 10 >= (losses.len() - 1) * 9, "{losses:?}");
    assert!(losses.last().unwrap() < &(0.8 * losses[0]), "{losses:?}");
}

#[test]
fn target_count_must_match_batch() {
    let model = Model::build(&ModelConfig::tiny("v8n").unwrap(), 0).unwrap();
    let x = Tensor::zeros([2, 3, 64, 64]);
    assert!(kfg_core::train::loss_and_grads(&model, &x, &[vec![]], LossWeights::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ciou_is_bounded(r in prop::collection::vec(-1.0f64..1.0, 8)) {
        let (p, t) = (random_box(&r[..4]), random_box(&r[4..]));
        let (vals, _) = graph_ciou(&[p], &[t]);
        prop_assert!(vals[0] <= 1.0 + 1e-9 && vals[0] >= -1.5);
    }

    #[test]
    fn every_target_is_assigned_or_counted(
        boxes in prop::collection::vec((0.0f32..60.0, 0.0f32..60.0, 1.0f32..40.0, 1.0f32..40.0, 0usize..3), 0..12)
    ) {
        let ts: Vec<Target> = boxes
            .iter()
            .map(|&(x, y, w, h, c)| Target { class: c, bbox: [x, y, (x + w).min(64.0), (y + h).min(64.0)] })
            .collect();
        let (a, conflicts) = assign(std::slice::from_ref(&ts), &GRIDS);
        prop_assert_eq!(a.len() + conflicts, ts.len());
        for x in &a {
            let (h, w, _) = GRIDS[x.level];
            prop_assert!(x.row < h && x.col < w);
        }
    }
}
