use crate::error::{Result, TensorError};
use crate::kernels::conv::window_out;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2dParams {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Pool2dParams {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Pool2dParams {
            kernel,
            stride,
            pad,
        }
    }

    pub(crate) fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        const OP: &str = "pool2d";
        if self.kernel == 0 {
            return Err(TensorError::invalid(OP, "kernel must be >= 1"));
        }
        if 2 * self.pad > self.kernel {
            return Err(TensorError::invalid(
                OP,
                format!(
                    "pad {} exceeds half the window {}; a window could fall outside the input",
                    self.pad, self.kernel
                ),
            ));
        }
        Ok((
            window_out(OP, h, self.kernel, self.stride, self.pad, 1)?,
            window_out(OP, w, self.kernel, self.stride, self.pad, 1)?,
        ))
    }
}

/// Max pooling over `planes` independent `h x w` planes. Returns the output and,
/// per output element, the flat input index that won.
pub(crate) fn max_pool<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    p: &Pool2dParams,
) -> Result<(Vec<T>, Vec<u32>, usize, usize)> {
    let (ho, wo) = p.out_dims(h, w)?;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = u32::MAX;
                for ki in 0..p.kernel {
                    let iy = (oy * p.stride + ki) as isize - p.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..p.kernel {
                        let ix = (ox * p.stride + kj) as isize - p.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if x[idx] > best || best_idx == u32::MAX {
                            best = x[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((out, arg, ho, wo))
}

/// Average pooling; padded cells count toward the divisor.
pub(crate) fn avg_pool<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    p: &Pool2dParams,
) -> Result<(Vec<T>, usize, usize)> {
    let (ho, wo) = p.out_dims(h, w)?;
    let inv = T::one() / T::from_usize(p.kernel * p.kernel).unwrap();
    let mut out = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ki in 0..p.kernel {
                    let iy = (oy * p.stride + ki) as isize - p.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..p.kernel {
                        let ix = (ox * p.stride + kj) as isize - p.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc = acc + x[base + iy as usize * w + ix as usize];
                        }
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Ok((out, ho, wo))
}

pub(crate) fn avg_pool_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    p: &Pool2dParams,
) -> Vec<T> {
    let inv = T::one() / T::from_usize(p.kernel * p.kernel).unwrap();
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(pl * ho + oy) * wo + ox] * inv;
                for ki in 0..p.kernel {
                    let iy = (oy * p.stride + ki) as isize - p.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..p.kernel {
                        let ix = (ox * p.stride + kj) as isize - p.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let i = base + iy as usize * w + ix as usize;
                            dx[i] = dx[i] + g;
                        }
                    }
                }
            }
        }
    }
    dx
}
