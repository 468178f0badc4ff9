//! Dataset-level evaluation: per-image matching merged into per-class
//! ranked records, then P, R, AP and mAP@0.5.

use std::fmt::Write as _;

use kfg_core::Model;

use crate::boxes::{Detection, GroundTruth};
use crate::dataset::Sample;
use crate::decode::decode;
use crate::error::Result;
use crate::image::to_batch;
use crate::labels::CLASS_NAMES;
use crate::metrics::{average_precision, map50, match_detections, precision_recall};
use crate::nms::nms;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub conf: f32,
    pub nms_iou: f32,
    pub match_iou: f32,
    /// Worker threads for inference; results do not depend on it.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf: 0.25,
            nms_iou: 0.45,
            match_iou: 0.5,
            workers: 1,
        }
    }
}

/// Detections for one image after thresholding and NMS, sorted by
/// descending confidence.
pub fn detect(model: &Model, sample: &Sample, conf: f32, nms_iou: f32) -> Result<Vec<Detection>> {
    let x = to_batch(&[&sample.image])?;
    let maps = model.predict(&x)?;
    let dets = decode(&maps, conf).pop().unwrap_or_default();
    Ok(nms(&dets, nms_iou))
}

/// One ranked detection: confidence, then `(image, rank in image)` as a
/// deterministic tiebreak.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Record {
    confidence: f32,
    image: usize,
    rank: usize,
    tp: bool,
}

/// Counts and ranked records, mergeable in any order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Accumulator {
    records: Vec<Vec<Record>>,
    n_gt: Vec<usize>,
}

impl Accumulator {
    pub fn new(nc: usize) -> Self {
        Accumulator {
            records: vec![Vec::new(); nc],
            n_gt: vec![0; nc],
        }
    }

    pub fn add_image(&mut self, image: usize, dets: &[Detection], gts: &[GroundTruth], iou_thresh: f32) {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
        let sorted: Vec<Detection> = order.iter().map(|&i| dets[i]).collect();
        let m = match_detections(&sorted, gts, iou_thresh);
        for (rank, (d, tp)) in sorted.iter().zip(m.flags).enumerate() {
            self.records[d.class].push(Record {
                confidence: d.confidence,
                image,
                rank,
                tp,
            });
        }
        for g in gts {
            self.n_gt[g.class] += 1;
        }
    }

    pub fn merge(&mut self, other: Accumulator) {
        for (mine, theirs) in self.records.iter_mut().zip(other.records) {
            mine.extend(theirs);
        }
        for (a, b) in self.n_gt.iter_mut().zip(other.n_gt) {
            *a += b;
        }
    }

    pub fn report(mut self) -> MetricsReport {
        let mut per_class = Vec::new();
        for (class, recs) in self.records.iter_mut().enumerate() {
            recs.sort_by(|a, b| {
                b.confidence
                    .total_cmp(&a.confidence)
                    .then(a.image.cmp(&b.image))
                    .then(a.rank.cmp(&b.rank))
            });
            let flags: Vec<bool> = recs.iter().map(|r| r.tp).collect();
            let n_gt = self.n_gt[class];
            let tp = flags.iter().filter(|&&f| f).count();
            let fp = flags.len() - tp;
            let pr = precision_recall(tp, fp, n_gt - tp);
            per_class.push(ClassMetrics {
                class,
                n_gt,
                tp,
                fp,
                fn_: n_gt - tp,
                precision: pr.precision,
                recall: pr.recall,
                degenerate: pr.degenerate,
                ap: average_precision(&flags, n_gt),
            });
        }
        MetricsReport::from_classes(per_class)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    /// Some ratio was 0/0.
    pub degenerate: bool,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Mean AP over classes with ground truth; 0 when there are none.
    pub map50: f64,
    /// Mean per-class precision and recall over classes with ground truth.
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub fps: Option<f64>,
    pub params: Option<usize>,
}

impl MetricsReport {
    pub fn from_classes(per_class: Vec<ClassMetrics>) -> Self {
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.n_gt > 0).collect();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
            }
        };
        let aps: Vec<(f64, usize)> = per_class.iter().map(|c| (c.ap, c.n_gt)).collect();
        MetricsReport {
            map50: map50(&aps).unwrap_or(0.0),
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            tp: per_class.iter().map(|c| c.tp).sum(),
            fp: per_class.iter().map(|c| c.fp).sum(),
            fn_: per_class.iter().map(|c| c.fn_).sum(),
            fps: None,
            params: None,
            per_class,
        }
    }

    /// Classes without ground truth; excluded from the means.
    pub fn absent_classes(&self) -> Vec<usize> {
        self.per_class.iter().filter(|c| c.n_gt == 0).map(|c| c.class).collect()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}", "class", "gt", "tp", "fp", "fn", "P", "R", "AP50");
        for c in &self.per_class {
            let name = CLASS_NAMES.get(c.class).map_or_else(|| c.class.to_string(), |n| n.to_string());
            let note = if c.n_gt == 0 { "  (no ground truth)" } else { "" };
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4}{note}",
                name, c.n_gt, c.tp, c.fp, c.fn_, c.precision, c.recall, c.ap
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4}",
            "all",
            self.tp + self.fn_,
            self.tp,
            self.fp,
            self.fn_,
            self.precision,
            self.recall,
            self.map50
        );
        s
    }

    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("map50", format!("{:.6}", self.map50)),
            ("precision", format!("{:.6}", self.precision)),
            ("recall", format!("{:.6}", self.recall)),
            ("tp", self.tp.to_string()),
            ("fp", self.fp.to_string()),
            ("fn", self.fn_.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "class{}.gt={}\nclass{}.precision={:.6}\nclass{}.recall={:.6}\nclass{}.ap50={:.6}",
                c.class, c.n_gt, c.class, c.precision, c.class, c.recall, c.class, c.ap
            );
        }
        if let Some(f) = self.fps {
            let _ = writeln!(s, "fps={f:.3}");
        }
        if let Some(p) = self.params {
            let _ = writeln!(s, "params={p}");
        }
        s
    }
}

/// Metrics for precomputed detections, image by image.
pub fn evaluate_detections(images: &[(Vec<Detection>, Vec<GroundTruth>)], nc: usize, iou_thresh: f32) -> MetricsReport {
    let mut acc = Accumulator::new(nc);
    for (i, (dets, gts)) in images.iter().enumerate() {
        acc.add_image(i, dets, gts, iou_thresh);
    }
    acc.report()
}

/// Run `model` over `samples` and score the detections.
pub fn evaluate_model(model: &Model, samples: &[Sample], cfg: EvalConfig) -> Result<MetricsReport> {
    let nc = model.cfg.nc;
    let workers = cfg.workers.clamp(1, samples.len().max(1));
    let chunk = samples.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Accumulator>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    let mut acc = Accumulator::new(nc);
                    for (j, s) in part.iter().enumerate() {
                        let dets = detect(model, s, cfg.conf, cfg.nms_iou)?;
                        acc.add_image(c * chunk + j, &dets, &s.gts, cfg.match_iou);
                    }
                    Ok(acc)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut acc = Accumulator::new(nc);
    for p in parts {
        acc.merge(p?);
    }
    let mut report = acc.report();
    report.params = Some(model.audit().dedup_total);
    Ok(report)
}
