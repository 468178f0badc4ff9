//! Direct and im2col + GEMM convolution kernels.

#![allow(clippy::needless_range_loop)]

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            pad: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, pad: usize) -> Self {
        Conv2dParams {
            stride,
            pad,
            ..Default::default()
        }
    }

    pub fn groups(self, groups: usize) -> Self {
        Conv2dParams { groups, ..self }
    }

    pub fn dilation(self, dilation: usize) -> Self {
        Conv2dParams { dilation, ..self }
    }
}

/// Output length of a sliding window along one axis.
pub(crate) fn window_out(
    op: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 || dilation == 0 {
        return Err(TensorError::invalid(op, "kernel, stride and dilation must be >= 1"));
    }
    let span = dilation * (kernel - 1) + 1;
    if input + 2 * pad < span {
        return Err(TensorError::ShapeMismatch {
            op,
            dim: "padded spatial extent",
            expected: span,
            got: input + 2 * pad,
        });
    }
    Ok((input + 2 * pad - span) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub p: Conv2dParams,
    /// Weight carries a leading batch axis: one kernel per sample.
    pub per_sample: bool,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], per_sample: bool, p: Conv2dParams) -> Result<Self> {
        const OP: &str = "conv2d";
        let [n, cin, h, wd] = *x else {
            return Err(TensorError::Rank {
                op: OP,
                expected: 4,
                shape: x.to_vec(),
            });
        };
        let (cout, cin_g, kh, kw) = match (per_sample, w) {
            (false, &[co, ci, kh, kw]) => (co, ci, kh, kw),
            (true, &[wn, co, ci, kh, kw]) => {
                if wn != n {
                    return Err(TensorError::ShapeMismatch {
                        op: OP,
                        dim: "per-sample weight batch",
                        expected: n,
                        got: wn,
                    });
                }
                (co, ci, kh, kw)
            }
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: if per_sample { 5 } else { 4 },
                    shape: w.to_vec(),
                })
            }
        };
        let g = p.groups;
        if g == 0 || cin % g != 0 {
            return Err(TensorError::invalid(
                OP,
                format!("input channels {cin} not divisible by groups {g}"),
            ));
        }
        if cout % g != 0 {
            return Err(TensorError::invalid(
                OP,
                format!("output channels {cout} not divisible by groups {g}"),
            ));
        }
        if cin / g != cin_g {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "weight input channels (Cin/groups)",
                expected: cin / g,
                got: cin_g,
            });
        }
        let ho = window_out(OP, h, kh, p.stride, p.pad, p.dilation)?;
        let wo = window_out(OP, wd, kw, p.stride, p.pad, p.dilation)?;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            cin_g,
            cout_g: cout / g,
            kh,
            kw,
            ho,
            wo,
            p,
            per_sample,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    fn kk(&self) -> usize {
        self.kh * self.kw
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.kk()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn weight_sample_len(&self) -> usize {
        self.cout * self.cin_g * self.kk()
    }

    fn weight_base(&self, n: usize) -> usize {
        if self.per_sample {
            n * self.weight_sample_len()
        } else {
            0
        }
    }

    /// Output columns `[lo, hi)` whose input index `o * stride + offset`
    /// lands inside `[0, extent)`.
    fn valid_range(&self, offset: isize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.p.stride as isize;
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let hi = if (extent as isize) <= offset {
            0
        } else {
            ((extent as isize - 1 - offset) / s + 1).min(out as isize)
        };
        let lo = lo.min(out as isize) as usize;
        (lo, (hi.max(lo as isize)) as usize)
    }
}

fn im2col<T: Scalar>(src: &[T], g: &ConvGeom, col: &mut [T]) {
    let hw_o = g.ho * g.wo;
    let s = g.p.stride;
    let d = g.p.dilation;
    let pad = g.p.pad as isize;
    for c in 0..g.cin_g {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut col[((c * g.kh + ki) * g.kw + kj) * hw_o..][..hw_o];
                let xoff = (kj * d) as isize - pad;
                let (lo, hi) = g.valid_range(xoff, g.w, g.wo);
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * s + ki * d) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if s == 1 {
                        let start = (lo as isize + xoff) as usize;
                        dst[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src_row[(ox as isize * s as isize + xoff) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dst: &mut [T]) {
    let hw_o = g.ho * g.wo;
    let s = g.p.stride;
    let d = g.p.dilation;
    let pad = g.p.pad as isize;
    for c in 0..g.cin_g {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &col[((c * g.kh + ki) * g.kw + kj) * hw_o..][..hw_o];
                let xoff = (kj * d) as isize - pad;
                let (lo, hi) = g.valid_range(xoff, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * s + ki * d) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in lo..hi {
                        let ix = (ox as isize * s as isize + xoff) as usize;
                        drow[ix] = drow[ix] + src[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let hw_o = g.ho * g.wo;
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * hw_o;
    let mut out = vec![T::zero(); g.n * out_sample];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let rows = g.col_rows();
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * hw_o]
        };
        for n in 0..g.n {
            let wbase = g.weight_base(n);
            for grp in 0..g.p.groups {
                let src = &x[n * in_sample + grp * g.cin_g * g.h * g.w..][..g.cin_g * g.h * g.w];
                let cmat: &[T] = if g.is_pointwise() {
                    src
                } else {
                    im2col(src, g, &mut col);
                    &col
                };
                let wg = &w[wbase + grp * g.cout_g * rows..][..g.cout_g * rows];
                let dst = &mut out[n * out_sample + grp * g.cout_g * hw_o..][..g.cout_g * hw_o];
                gemm(
                    Mat::new(wg, g.cout_g, rows),
                    Mat::new(cmat, rows, hw_o),
                    dst,
                    false,
                );
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            for (c, &bv) in b.iter().enumerate() {
                for v in &mut out[n * out_sample + c * hw_o..][..hw_o] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let hw_o = g.ho * g.wo;
    let s = g.p.stride;
    let d = g.p.dilation;
    let pad = g.p.pad as isize;
    for n in 0..g.n {
        let wbase = g.weight_base(n);
        for c in 0..g.cout {
            let src = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let wc = &w[wbase + c * g.kk()..][..g.kk()];
            let dst = &mut out[(n * g.cout + c) * hw_o..][..hw_o];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = wc[ki * g.kw + kj];
                    let xoff = (kj * d) as isize - pad;
                    let (lo, hi) = g.valid_range(xoff, g.w, g.wo);
                    for oy in 0..g.ho {
                        let iy = (oy * s + ki * d) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        let drow = &mut dst[oy * g.wo..][..g.wo];
                        for ox in lo..hi {
                            let ix = (ox as isize * s as isize + xoff) as usize;
                            drow[ox] = drow[ox] + wv * srow[ix];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let hw_o = g.ho * g.wo;
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * hw_o;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc = *acc + dy[n * out_sample + c * hw_o..][..hw_o].iter().copied().sum();
            }
        }
        db
    });
    if !(need_dx || need_dw) {
        return ConvGrads { dx, dw, db };
    }
    if g.is_depthwise() {
        depthwise_backward(x, w, dy, g, dx.as_deref_mut(), dw.as_deref_mut());
        return ConvGrads { dx, dw, db };
    }
    let rows = g.col_rows();
    let pointwise = g.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { rows * hw_o }];
    let mut dcol = vec![T::zero(); if pointwise { 0 } else { rows * hw_o }];
    for n in 0..g.n {
        let wbase = g.weight_base(n);
        for grp in 0..g.p.groups {
            let in_off = n * in_sample + grp * g.cin_g * g.h * g.w;
            let in_len = g.cin_g * g.h * g.w;
            let dyg = &dy[n * out_sample + grp * g.cout_g * hw_o..][..g.cout_g * hw_o];
            let w_off = wbase + grp * g.cout_g * rows;
            if let Some(dw) = dw.as_deref_mut() {
                let src = &x[in_off..][..in_len];
                let cmat: &[T] = if pointwise {
                    src
                } else {
                    im2col(src, g, &mut col);
                    &col
                };
                // dW_g += dY_g (cout_g x hw) * col^T (hw x rows)
                gemm(
                    Mat::new(dyg, g.cout_g, hw_o),
                    Mat::new(cmat, rows, hw_o).t(),
                    &mut dw[w_off..][..g.cout_g * rows],
                    true,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wg = &w[w_off..][..g.cout_g * rows];
                let target = &mut dx[in_off..][..in_len];
                if pointwise {
                    gemm(
                        Mat::new(wg, g.cout_g, rows).t(),
                        Mat::new(dyg, g.cout_g, hw_o),
                        target,
                        true,
                    );
                } else {
                    gemm(
                        Mat::new(wg, g.cout_g, rows).t(),
                        Mat::new(dyg, g.cout_g, hw_o),
                        &mut dcol,
                        false,
                    );
                    col2im(&dcol, g, target);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let hw_o = g.ho * g.wo;
    let s = g.p.stride;
    let d = g.p.dilation;
    let pad = g.p.pad as isize;
    for n in 0..g.n {
        let wbase = g.weight_base(n);
        for c in 0..g.cout {
            let plane = (n * g.cin + c) * g.h * g.w;
            let dyc = &dy[(n * g.cout + c) * hw_o..][..hw_o];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let widx = wbase + c * g.kk() + ki * g.kw + kj;
                    let wv = w[widx];
                    let xoff = (kj * d) as isize - pad;
                    let (lo, hi) = g.valid_range(xoff, g.w, g.wo);
                    let mut acc = T::zero();
                    for oy in 0..g.ho {
                        let iy = (oy * s + ki * d) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = plane + iy as usize * g.w;
                        let dyr = &dyc[oy * g.wo..][..g.wo];
                        for ox in lo..hi {
                            let ix = row + (ox as isize * s as isize + xoff) as usize;
                            acc = acc + dyr[ox] * x[ix];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[ix] = dx[ix] + wv * dyr[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] = dw[widx] + acc;
                    }
                }
            }
        }
    }
}
