//! Batch and group normalization over `N, C, H, W` buffers.

#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

use crate::scalar::Scalar;

/// Per-channel statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Population mean and biased variance of each `(sample, group)` block, where a
/// block is `cpg` consecutive channels of `hw` elements.
fn block_stats<T: Scalar>(x: &[T], blocks: usize, len: usize) -> (Vec<T>, Vec<T>) {
    let inv = T::one() / T::from_usize(len).unwrap();
    let mut mean = Vec::with_capacity(blocks);
    let mut var = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let s = &x[b * len..(b + 1) * len];
        let m = s.iter().copied().sum::<T>() * inv;
        let v = s.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv;
        mean.push(m);
        var.push(v);
    }
    (mean, var)
}

/// Channel mean and biased variance across batch and space.
pub(crate) fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    for s in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m = *m + x[(s * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
    }
    for m in &mut mean {
        *m = *m / count;
    }
    let mut var = vec![T::zero(); c];
    for s in 0..n {
        for (ch, v) in var.iter_mut().enumerate() {
            let m = mean[ch];
            *v = *v
                + x[(s * c + ch) * hw..][..hw]
                    .iter()
                    .map(|&e| (e - m) * (e - m))
                    .sum::<T>();
        }
    }
    for v in &mut var {
        *v = *v / count;
    }
    (mean, var)
}

/// `y = (x - mean_c) * rstd_c * gamma_c + beta_c`.
pub(crate) fn channel_affine<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    stats: &NormStats<T>,
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for s in 0..n {
        for ch in 0..c {
            let scale = stats.rstd[ch] * gamma[ch];
            let shift = beta[ch] - stats.mean[ch] * scale;
            y.extend(x[(s * c + ch) * hw..][..hw].iter().map(|&v| v * scale + shift));
        }
    }
    y
}

pub(crate) struct AffineGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// Backward of batch norm. With `batch_stats` the mean/variance are functions
/// of `x`; otherwise they are constants (running statistics).
pub(crate) fn batch_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    hw: usize,
    stats: &NormStats<T>,
    gamma: &[T],
    batch_stats: bool,
) -> AffineGrads<T> {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let count = T::from_usize(n * hw).unwrap();
    for ch in 0..c {
        let (m, r) = (stats.mean[ch], stats.rstd[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in 0..hw {
                let xhat = (x[off + i] - m) * r;
                sum_dy = sum_dy + dy[off + i];
                sum_dy_xhat = sum_dy_xhat + dy[off + i] * xhat;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let g = gamma[ch];
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in 0..hw {
                dx[off + i] = if batch_stats {
                    let xhat = (x[off + i] - m) * r;
                    g * r * (dy[off + i] - (sum_dy + xhat * sum_dy_xhat) / count)
                } else {
                    g * r * dy[off + i]
                };
            }
        }
    }
    AffineGrads { dx, dgamma, dbeta }
}

pub(crate) fn group_norm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormStats<T>) {
    let cpg = c / groups;
    let (mean, var) = block_stats(x, n * groups, cpg * hw);
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = Vec::with_capacity(x.len());
    for s in 0..n {
        for ch in 0..c {
            let b = s * groups + ch / cpg;
            let scale = rstd[b] * gamma[ch];
            let shift = beta[ch] - mean[b] * scale;
            y.extend(x[(s * c + ch) * hw..][..hw].iter().map(|&v| v * scale + shift));
        }
    }
    (y, NormStats { mean, rstd })
}

pub(crate) fn group_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    stats: &NormStats<T>,
    gamma: &[T],
) -> AffineGrads<T> {
    let cpg = c / groups;
    let count = T::from_usize(cpg * hw).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for grp in 0..groups {
            let b = s * groups + grp;
            let (m, r) = (stats.mean[b], stats.rstd[b]);
            // Sums of dxhat and dxhat * xhat over the block, dxhat = dy * gamma.
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for ch in grp * cpg..(grp + 1) * cpg {
                let off = (s * c + ch) * hw;
                let g = gamma[ch];
                let mut cg = T::zero();
                let mut cb = T::zero();
                for i in 0..hw {
                    let xhat = (x[off + i] - m) * r;
                    let d = dy[off + i];
                    cg = cg + d * xhat;
                    cb = cb + d;
                    sum_d = sum_d + d * g;
                    sum_dx = sum_dx + d * g * xhat;
                }
                dgamma[ch] = dgamma[ch] + cg;
                dbeta[ch] = dbeta[ch] + cb;
            }
            for ch in grp * cpg..(grp + 1) * cpg {
                let off = (s * c + ch) * hw;
                let g = gamma[ch];
                for i in 0..hw {
                    let xhat = (x[off + i] - m) * r;
                    dx[off + i] = r * (dy[off + i] * g - (sum_d + xhat * sum_dx) / count);
                }
            }
        }
    }
    AffineGrads { dx, dgamma, dbeta }
}
