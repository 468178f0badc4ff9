//! Raw head maps to scored boxes.

use kfg_core::model::LevelMaps;

use crate::boxes::{BBox, Detection};

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Expected bin index of a distance distribution.
fn expectation(logits: &[f32]) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut den = 0.0f32;
    let mut num = 0.0f32;
    for (i, &l) in logits.iter().enumerate() {
        let e = (l - max).exp();
        den += e;
        num += e * i as f32;
    }
    num / den
}

/// Detections for every image in the batch: per cell, class probability is
/// the sigmoid of the best logit and the box sides are the distribution
/// expectations scaled by the stride, measured from the cell center.
/// Cells whose best probability is below `conf_thresh` are dropped.
pub fn decode(maps: &[LevelMaps<f32>], conf_thresh: f32) -> Vec<Vec<Detection>> {
    let batch = maps.first().map_or(0, |m| m.cls.shape()[0]);
    let mut out = vec![Vec::new(); batch];
    for m in maps {
        let [_, nc, h, w] = m.cls.shape().try_into().expect("rank-4 class map");
        let reg_max = m.reg.shape()[1] / 4;
        let (cls, reg) = (m.cls.data(), m.reg.data());
        let s = m.stride as f32;
        let plane = h * w;
        let mut bins = vec![0.0f32; reg_max];
        for (n, dets) in out.iter_mut().enumerate() {
            for row in 0..h {
                for col in 0..w {
                    let cell = row * w + col;
                    let (class, logit) = (0..nc)
                        .map(|c| (c, cls[(n * nc + c) * plane + cell]))
                        .fold((0, f32::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
                    let confidence = sigmoid(logit);
                    if confidence < conf_thresh {
                        continue;
                    }
                    let mut d = [0.0f32; 4];
                    for (k, side) in d.iter_mut().enumerate() {
                        for (b, v) in bins.iter_mut().enumerate() {
                            *v = reg[(n * 4 * reg_max + k * reg_max + b) * plane + cell];
                        }
                        *side = expectation(&bins) * s;
                    }
                    let (ax, ay) = ((col as f32 + 0.5) * s, (row as f32 + 0.5) * s);
                    dets.push(Detection {
                        bbox: BBox::new(ax - d[0], ay - d[1], ax + d[2], ay + d[3]),
                        class,
                        confidence,
                    });
                }
            }
        }
    }
    out
}
