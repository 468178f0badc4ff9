//! YOLO text labels: one `class cx cy w h` line per box, normalized to the
//! image size.

use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::{BBox, GroundTruth};
use crate::error::{EvalError, Result};

/// Class names of the three-class fundus label set.
pub const CLASS_NAMES: [&str; 3] = ["Proliferate", "No Proliferate", "No-DR"];

#[derive(Clone, Debug, PartialEq)]
pub struct LabelWarning {
    pub line: usize,
    pub msg: String,
}

/// Parse label text for an image of `width x height` pixels. Coordinates
/// outside `[0, 1]` are clamped and reported as warnings.
pub fn parse_yolo_labels(
    text: &str,
    path: &Path,
    width: usize,
    height: usize,
    nc: usize,
) -> Result<(Vec<GroundTruth>, Vec<LabelWarning>)> {
    let mut gts = Vec::new();
    let mut warnings = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| EvalError::Label {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id {:?}", fields[0])))?;
        if class >= nc {
            return Err(EvalError::ClassRange {
                path: path.to_path_buf(),
                line,
                class,
                nc,
            });
        }
        let mut v = [0.0f32; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            let x: f32 = f.parse().map_err(|_| err(format!("bad number {f:?}")))?;
            if !x.is_finite() {
                return Err(err(format!("non-finite value {f:?}")));
            }
            v[k] = x;
        }
        let [cx, cy, w, h] = v;
        let (x1, y1, x2, y2) = (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
        let clamped = [x1, y1, x2, y2].map(|c| c.clamp(0.0, 1.0));
        if clamped != [x1, y1, x2, y2] || w < 0.0 || h < 0.0 {
            warnings.push(LabelWarning {
                line,
                msg: format!("box {cx} {cy} {w} {h} clamped to the image"),
            });
        }
        let (wf, hf) = (width as f32, height as f32);
        gts.push(GroundTruth {
            bbox: BBox::new(clamped[0] * wf, clamped[1] * hf, clamped[2] * wf, clamped[3] * hf),
            class,
        });
    }
    Ok((gts, warnings))
}

pub fn load_yolo_labels(
    path: &Path,
    width: usize,
    height: usize,
    nc: usize,
) -> Result<(Vec<GroundTruth>, Vec<LabelWarning>)> {
    parse_yolo_labels(&std::fs::read_to_string(path)?, path, width, height, nc)
}

/// Format ground truth as label text.
pub fn format_yolo_labels(gts: &[GroundTruth], width: usize, height: usize) -> String {
    let (wf, hf) = (width as f32, height as f32);
    let mut s = String::new();
    for g in gts {
        let b = g.bbox;
        let _ = writeln!(
            s,
            "{} {:.6} {:.6} {:.6} {:.6}",
            g.class,
            (b.x1 + b.x2) / 2.0 / wf,
            (b.y1 + b.y2) / 2.0 / hf,
            b.width() / wf,
            b.height() / hf
        );
    }
    s
}
