//! Detection loss: classification BCE over every cell, CIoU box loss and a
//! distribution loss on the assigned cells.
//!
//! Assignment is deliberately simple: each ground-truth box is owned by the
//! cell containing its center on the single level whose scale best matches
//! the box size. A cell claimed twice keeps the first box; the rest are
//! counted as unassigned.

use kfg_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::Result;
use crate::nn::LevelOut;

/// Ground-truth box in pixels, `x1, y1, x2, y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub class: usize,
    pub bbox: [f32; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub box_: f64,
    pub cls: f64,
    pub dfl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            box_: 7.5,
            cls: 0.5,
            dfl: 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub level: usize,
    pub image: usize,
    pub row: usize,
    pub col: usize,
    pub class: usize,
    /// Box in units of the level's stride.
    pub grid_box: [f64; 4],
}

/// Level whose stride best matches a box of the given largest side: the
/// level where the box spans about four cells.
pub fn best_level(max_side: f64, strides: &[usize]) -> usize {
    let score = |s: usize| (max_side.max(1.0) / (4.0 * s as f64)).log2().abs();
    (0..strides.len())
        .min_by(|&a, &b| score(strides[a]).total_cmp(&score(strides[b])))
        .unwrap_or(0)
}

/// `grids[l] = (height, width, stride)`. Returns assignments and the count
/// of boxes that lost their cell to an earlier box.
pub fn assign(targets: &[Vec<Target>], grids: &[(usize, usize, usize)]) -> (Vec<Assignment>, usize) {
    let strides: Vec<usize> = grids.iter().map(|g| g.2).collect();
    let mut taken = std::collections::HashSet::new();
    let mut out = Vec::new();
    let mut conflicts = 0;
    for (n, ts) in targets.iter().enumerate() {
        for t in ts {
            let [x1, y1, x2, y2] = t.bbox.map(f64::from);
            let level = best_level((x2 - x1).max(y2 - y1), &strides);
            let (h, w, s) = grids[level];
            let s = s as f64;
            let cx = 0.5 * (x1 + x2) / s;
            let cy = 0.5 * (y1 + y2) / s;
            let col = (cx.floor().max(0.0) as usize).min(w - 1);
            let row = (cy.floor().max(0.0) as usize).min(h - 1);
            if !taken.insert((level, n, row, col)) {
                conflicts += 1;
                continue;
            }
            out.push(Assignment {
                level,
                image: n,
                row,
                col,
                class: t.class,
                grid_box: [x1 / s, y1 / s, x2 / s, y2 / s],
            });
        }
    }
    (out, conflicts)
}

/// Distances from the cell center to the four box sides, clamped to the
/// representable range `[0, reg_max - 1)`.
pub fn ltrb_targets(a: &Assignment, reg_max: usize) -> [f64; 4] {
    let (ax, ay) = (a.col as f64 + 0.5, a.row as f64 + 0.5);
    let [x1, y1, x2, y2] = a.grid_box;
    let hi = reg_max as f64 - 1.0 - 0.01;
    [ax - x1, ay - y1, x2 - ax, y2 - ay].map(|d| d.clamp(0.0, hi))
}

/// Scalar loss plus its weighted-out components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub total_value: f64,
    pub box_loss: f64,
    pub cls_loss: f64,
    pub dfl_loss: f64,
    pub assigned: usize,
    pub unassigned: usize,
}

fn column<T: Scalar>(g: &mut Graph<T>, vals: impl Iterator<Item = f64>) -> Var {
    let data: Vec<T> = vals.map(T::from_f64_lossy).collect();
    let m = data.len();
    g.constant(Tensor::new([m, 1], data).expect("column shape"))
}

/// Complete IoU between predicted boxes (four `[M, 1]` columns) and fixed
/// targets. The aspect-ratio trade-off weight is treated as a constant.
pub fn ciou<T: Scalar>(g: &mut Graph<T>, pred: [Var; 4], target: &[[f64; 4]]) -> Result<Var> {
    let eps = 1e-7;
    let [px1, py1, px2, py2] = pred;
    let [tx1, ty1, tx2, ty2] = [0, 1, 2, 3].map(|k| column(g, target.iter().map(|b| b[k])));
    let tw: Vec<f64> = target.iter().map(|b| b[2] - b[0]).collect();
    let th: Vec<f64> = target.iter().map(|b| b[3] - b[1] + eps).collect();

    let w1 = g.sub(px2, px1)?;
    let h1 = g.sub(py2, py1)?;
    let h1 = g.add_scalar(h1, T::from_f64_lossy(eps))?;

    let ix2 = g.minimum(px2, tx2)?;
    let ix1 = g.maximum(px1, tx1)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw)?;
    let iy2 = g.minimum(py2, ty2)?;
    let iy1 = g.maximum(py1, ty1)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;

    let a1 = g.mul(w1, h1)?;
    let a2 = column(g, tw.iter().zip(&th).map(|(w, h)| w * h));
    let union = g.add(a1, a2)?;
    let union = g.sub(union, inter)?;
    let union = g.add_scalar(union, T::from_f64_lossy(eps))?;
    let iou = g.div(inter, union)?;

    let ex2 = g.maximum(px2, tx2)?;
    let ex1 = g.minimum(px1, tx1)?;
    let cw = g.sub(ex2, ex1)?;
    let ey2 = g.maximum(py2, ty2)?;
    let ey1 = g.minimum(py1, ty1)?;
    let chh = g.sub(ey2, ey1)?;
    let cw2 = g.square(cw)?;
    let ch2 = g.square(chh)?;
    let c2 = g.add(cw2, ch2)?;
    let c2 = g.add_scalar(c2, T::from_f64_lossy(eps))?;

    // Squared center distance: ((tx1 + tx2 - px1 - px2)^2 + (ty1 + ty2 - py1 - py2)^2) / 4.
    let tcx = column(g, target.iter().map(|b| b[0] + b[2]));
    let tcy = column(g, target.iter().map(|b| b[1] + b[3]));
    let psx = g.add(px1, px2)?;
    let psy = g.add(py1, py2)?;
    let dx = g.sub(tcx, psx)?;
    let dy = g.sub(tcy, psy)?;
    let dx2 = g.square(dx)?;
    let dy2 = g.square(dy)?;
    let rho2 = g.add(dx2, dy2)?;
    let rho2 = g.mul_scalar(rho2, T::from_f64_lossy(0.25))?;
    let dist = g.div(rho2, c2)?;

    let ratio = g.div(w1, h1)?;
    let at_p = g.atan(ratio)?;
    let at_t = column(g, tw.iter().zip(&th).map(|(w, h)| (w / h).atan()));
    let da = g.sub(at_t, at_p)?;
    let v = g.square(da)?;
    let v = g.mul_scalar(v, T::from_f64_lossy(4.0 / (std::f64::consts::PI * std::f64::consts::PI)))?;
    let alpha: Vec<f64> = {
        let (vv, ii) = (g.value(v).data(), g.value(iou).data());
        vv.iter()
            .zip(ii)
            .map(|(&v, &i)| {
                let (v, i) = (v.as_f64(), i.as_f64());
                v / (v - i + 1.0 + eps)
            })
            .collect()
    };
    let alpha = column(g, alpha.into_iter());
    let av = g.mul(v, alpha)?;
    let penalty = g.add(dist, av)?;
    Ok(g.sub(iou, penalty)?)
}

pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    outs: &[LevelOut],
    targets: &[Vec<Target>],
    reg_max: usize,
    weights: LossWeights,
) -> Result<LossParts> {
    let grids: Vec<(usize, usize, usize)> = outs
        .iter()
        .map(|o| {
            let s = g.shape(o.cls);
            (s[2], s[3], o.stride)
        })
        .collect();
    let (assigned, unassigned) = assign(targets, &grids);
    let norm = T::one() / T::from_usize(assigned.len().max(1)).unwrap();

    let mut cls_terms = Vec::new();
    let mut box_terms = Vec::new();
    let mut dfl_terms = Vec::new();
    for (l, o) in outs.iter().enumerate() {
        let mut tgt = Tensor::<T>::zeros(g.shape(o.cls).to_vec());
        let here: Vec<&Assignment> = assigned.iter().filter(|a| a.level == l).collect();
        for a in &here {
            tgt.set(&[a.image, a.class, a.row, a.col], T::one());
        }
        let bce = g.bce_with_logits(o.cls, tgt)?;
        cls_terms.push(g.sum(bce)?);
        if here.is_empty() {
            continue;
        }

        let m = here.len();
        let positions: Vec<[usize; 3]> = here.iter().map(|a| [a.image, a.row, a.col]).collect();
        let rows = g.gather_cells(o.reg, &positions)?;
        let logits = g.reshape(rows, &[4 * m, reg_max])?;

        // Expected distance per side, in stride units.
        let p = g.softmax(logits, 1)?;
        let bins = g.constant(Tensor::from_fn([4 * m, reg_max], |i| T::from_usize(i % reg_max).unwrap()));
        let pb = g.mul(p, bins)?;
        let d = g.sum_axis(pb, 1)?;
        let d = g.reshape(d, &[m, 4])?;
        let side = |g: &mut Graph<T>, k: usize| g.narrow(d, 1, k, 1);
        let (dl, dt, dr, db) = (side(g, 0)?, side(g, 1)?, side(g, 2)?, side(g, 3)?);
        let ax = column(g, here.iter().map(|a| a.col as f64 + 0.5));
        let ay = column(g, here.iter().map(|a| a.row as f64 + 0.5));
        let pred = [g.sub(ax, dl)?, g.sub(ay, dt)?, g.add(ax, dr)?, g.add(ay, db)?];
        let boxes: Vec<[f64; 4]> = here.iter().map(|a| a.grid_box).collect();
        let ci = ciou(g, pred, &boxes)?;
        let s = g.sum(ci)?;
        let s = g.neg(s)?;
        box_terms.push(g.add_scalar(s, T::from_usize(m).unwrap())?);

        // Distribution loss: cross-entropy against the two bins around each
        // target distance, weighted by proximity.
        let mut wts = Tensor::<T>::zeros([4 * m, reg_max]);
        for (i, a) in here.iter().enumerate() {
            for (k, t) in ltrb_targets(a, reg_max).into_iter().enumerate() {
                let left = t.floor() as usize;
                let row = 4 * i + k;
                wts.set(&[row, left], T::from_f64_lossy(left as f64 + 1.0 - t));
                wts.set(&[row, left + 1], T::from_f64_lossy(t - left as f64));
            }
        }
        let ls = g.log_softmax(logits, 1)?;
        let w = g.constant(wts);
        let ce = g.mul(ls, w)?;
        let ce = g.sum(ce)?;
        dfl_terms.push(g.mul_scalar(ce, T::from_f64_lossy(-0.25))?);
    }

    let mut weighted = Vec::new();
    let mut parts = [0.0f64; 3];
    for (i, (terms, wgt)) in [(cls_terms, weights.cls), (box_terms, weights.box_), (dfl_terms, weights.dfl)]
        .into_iter()
        .enumerate()
    {
        if terms.is_empty() {
            continue;
        }
        let s = g.add_n(&terms)?;
        let s = g.mul_scalar(s, norm)?;
        parts[i] = g.value(s).data()[0].as_f64();
        weighted.push(g.mul_scalar(s, T::from_f64_lossy(wgt))?);
    }
    let total = g.add_n(&weighted)?;
    Ok(LossParts {
        total,
        total_value: g.value(total).data()[0].as_f64(),
        cls_loss: parts[0],
        box_loss: parts[1],
        dfl_loss: parts[2],
        assigned: assigned.len(),
        unassigned,
    })
}
