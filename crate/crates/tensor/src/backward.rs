use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::graph::{axis_split, sigmoid_scalar, Binary, Graph, Op, Unary, Var};
use crate::kernels::conv::conv2d_backward;
use crate::kernels::norm;
use crate::kernels::pool;
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::{numel, Tensor};

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    keyed: HashMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf (or `None` if it does not require grad or was
    /// unreachable from the loss).
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of the parameter leaf registered under `key`.
    pub fn keyed(&self, key: usize) -> Option<Tensor<T>> {
        self.get(*self.keyed.get(&key)?)
    }

    /// All keyed gradients, consuming the buffers.
    pub fn into_keyed(mut self) -> Vec<(usize, Tensor<T>)> {
        let mut keys: Vec<(usize, Var)> = self.keyed.iter().map(|(&k, &v)| (k, v)).collect();
        keys.sort_unstable();
        keys.into_iter()
            .filter_map(|(k, v)| {
                let g = self.grads[v.0].take()?;
                Some((k, Tensor::new(self.shapes[v.0].clone(), g).expect("gradient shape")))
            })
            .collect()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(TensorError::NotScalar(ls.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let mut contribs = self.local_grads(idx, &dy)?;
            if self.sign_flip.as_deref() == Some(node.op.name()) {
                if let Some((_, g)) = contribs.first_mut() {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (v, g) in contribs {
                if self.nodes[v.0].requires_grad {
                    add_into(&mut grads[v.0], g);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
            keyed: self.keyed().clone(),
        })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Input gradients of node `idx` given its output gradient. The first
    /// entry is the primary input (the one the sign-flip hook negates).
    fn local_grads(&self, idx: usize, dy: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let g = conv2d_backward(
                    self.data(*x),
                    self.data(*w),
                    dy,
                    geom,
                    (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))),
                );
                if let Some(dx) = g.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = g.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    out.push((*b, db));
                }
            }
            Op::MaxPool { x, arg } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (&a, &g) in arg.iter().zip(dy) {
                    dx[a as usize] = dx[a as usize] + g;
                }
                out.push((*x, dx));
            }
            Op::AvgPool { x, p } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4("avg_pool2d")?;
                let (_, _, ho, wo) = node.value.dims4("avg_pool2d")?;
                out.push((*x, pool::avg_pool_backward(dy, n * c, h, w, ho, wo, p)));
            }
            Op::Upsample { x, scale } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4("upsample_nearest")?;
                let wo = w * scale;
                let mut dx = vec![T::zero(); n * c * h * w];
                for pl in 0..n * c {
                    for oy in 0..h * scale {
                        for ox in 0..wo {
                            let i = pl * h * w + (oy / scale) * w + ox / scale;
                            dx[i] = dx[i] + dy[(pl * h * scale + oy) * wo + ox];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat { xs } => {
                let shape = node.value.shape();
                let n = shape[0];
                let inner = numel(&shape[2..]);
                let total = shape[1];
                let mut offset = 0;
                for &v in xs {
                    let c = self.nodes[v.0].value.shape()[1];
                    if self.rg(v) {
                        let mut g = Vec::with_capacity(n * c * inner);
                        for s in 0..n {
                            g.extend_from_slice(&dy[(s * total + offset) * inner..][..c * inner]);
                        }
                        out.push((v, g));
                    }
                    offset += c;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, dim, inner) = axis_split(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); numel(xs)];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&dy[o * len * inner..][..len * inner]);
                }
                out.push((*x, dx));
            }
            Op::Reshape { x } => out.push((*x, dy.to_vec())),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                batch_stats,
            } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4("batch_norm")?;
                let g = norm::batch_norm_backward(
                    self.data(*x),
                    dy,
                    n,
                    c,
                    h * w,
                    stats,
                    self.data(*gamma),
                    *batch_stats,
                );
                out.push((*x, g.dx));
                out.push((*gamma, g.dgamma));
                out.push((*beta, g.dbeta));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4("group_norm")?;
                let g = norm::group_norm_backward(
                    self.data(*x),
                    dy,
                    n,
                    c,
                    h * w,
                    *groups,
                    stats,
                    self.data(*gamma),
                );
                out.push((*x, g.dx));
                out.push((*gamma, g.dgamma));
                out.push((*beta, g.dbeta));
            }
            Op::Unary { x, kind } => {
                let xv = self.data(*x);
                let d: Vec<T> = match *kind {
                    Unary::Silu => xv
                        .iter()
                        .zip(dy)
                        .map(|(&v, &g)| {
                            let s = sigmoid_scalar(v);
                            g * s * (T::one() + v * (T::one() - s))
                        })
                        .collect(),
                    Unary::Sigmoid => y
                        .iter()
                        .zip(dy)
                        .map(|(&s, &g)| g * s * (T::one() - s))
                        .collect(),
                    Unary::Relu => xv
                        .iter()
                        .zip(dy)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                    Unary::Neg => dy.iter().map(|&g| -g).collect(),
                    Unary::Square => xv
                        .iter()
                        .zip(dy)
                        .map(|(&v, &g)| g * (v + v))
                        .collect(),
                    Unary::Sqrt => {
                        let half = T::from_f64_lossy(0.5);
                        y.iter().zip(dy).map(|(&s, &g)| g * half / s).collect()
                    }
                    Unary::Atan => xv
                        .iter()
                        .zip(dy)
                        .map(|(&v, &g)| g / (T::one() + v * v))
                        .collect(),
                    Unary::Exp => y.iter().zip(dy).map(|(&e, &g)| g * e).collect(),
                    Unary::Log => xv.iter().zip(dy).map(|(&v, &g)| g / v).collect(),
                    Unary::AddScalar(_) => dy.to_vec(),
                    Unary::MulScalar(c) => dy.iter().map(|&g| g * c).collect(),
                };
                out.push((*x, d));
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let (da, db): (Vec<T>, Vec<T>) = match kind {
                    Binary::Add => (dy.to_vec(), dy.to_vec()),
                    Binary::Sub => (dy.to_vec(), dy.iter().map(|&g| -g).collect()),
                    Binary::Mul => (
                        dy.iter().zip(bv).map(|(&g, &v)| g * v).collect(),
                        dy.iter().zip(av).map(|(&g, &v)| g * v).collect(),
                    ),
                    Binary::Div => (
                        dy.iter().zip(bv).map(|(&g, &v)| g / v).collect(),
                        dy.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&g, (&p, &q))| -g * p / (q * q))
                            .collect(),
                    ),
                    Binary::Min | Binary::Max => {
                        // Ties route the gradient to `a`.
                        let pick_b = |p: T, q: T| {
                            if *kind == Binary::Min {
                                q < p
                            } else {
                                q > p
                            }
                        };
                        av.iter()
                            .zip(bv)
                            .zip(dy)
                            .map(|((&p, &q), &g)| {
                                if pick_b(p, q) {
                                    (T::zero(), g)
                                } else {
                                    (g, T::zero())
                                }
                            })
                            .unzip()
                    }
                };
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::ScaleBy { x, s } => {
                let sv = self.data(*s)[0];
                out.push((*x, dy.iter().map(|&g| g * sv).collect()));
                let ds: T = dy.iter().zip(self.data(*x)).map(|(&g, &v)| g * v).sum();
                out.push((*s, vec![ds]));
            }
            Op::ChannelBias { x, b } => {
                let shape = node.value.shape();
                let c = shape[1];
                let inner = numel(&shape[2..]);
                let mut db = vec![T::zero(); c];
                for (i, &g) in dy.iter().enumerate() {
                    let ch = (i / inner) % c;
                    db[ch] = db[ch] + g;
                }
                out.push((*x, dy.to_vec()));
                out.push((*b, db));
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); dy.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        if log {
                            let gs: T = (0..len).map(|k| dy[at(k)]).sum();
                            for k in 0..len {
                                dx[at(k)] = dy[at(k)] - y[at(k)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..len).map(|k| dy[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.nodes[x.0].value.shape()[0], self.nodes[x.0].value.shape()[1]);
                let dout = self.nodes[w.0].value.shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    gemm(
                        Mat::new(dy, n, dout),
                        Mat::new(self.data(*w), dout, din),
                        &mut dx,
                        false,
                    );
                    out.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm(
                        Mat::new(dy, n, dout).t(),
                        Mat::new(self.data(*x), n, din),
                        &mut dw,
                        false,
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in dy.chunks(dout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4("global_avg_pool")?;
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut dx = Vec::with_capacity(n * c * h * w);
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g * inv, h * w));
                }
                out.push((*x, dx));
            }
            Op::Sum { x } => {
                out.push((*x, vec![dy[0]; self.nodes[x.0].value.numel()]));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.nodes[x.0].value.shape(), *axis);
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        dx.extend_from_slice(&dy[o * inner..][..inner]);
                    }
                }
                out.push((*x, dx));
            }
            Op::Gather { x, positions } => {
                let (_, c, h, w) = self.nodes[x.0].value.dims4("gather_cells")?;
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (m, &[s, i, j]) in positions.iter().enumerate() {
                    for ch in 0..c {
                        let idx = ((s * c + ch) * h + i) * w + j;
                        dx[idx] = dx[idx] + dy[m * c + ch];
                    }
                }
                out.push((*x, dx));
            }
            Op::BceWithLogits { x, target } => {
                let dx = self
                    .data(*x)
                    .iter()
                    .zip(target.data())
                    .zip(dy)
                    .map(|((&v, &t), &g)| g * (sigmoid_scalar(v) - t))
                    .collect();
                out.push((*x, dx));
            }
            Op::MixKernels { alpha, bank, slots } => {
                let bshape = self.nodes[bank.0].value.shape();
                let k = bshape[0];
                let cell = numel(&bshape[1..]);
                let n = self.nodes[alpha.0].value.shape()[0];
                let sk = slots * k;
                let (a, b) = (self.data(*alpha), self.data(*bank));
                if self.rg(*bank) {
                    let mut dbank = vec![T::zero(); b.len()];
                    for s in 0..n {
                        for sl in 0..*slots {
                            let g = &dy[(s * slots + sl) * cell..][..cell];
                            for kk in 0..k {
                                let wgt = a[s * sk + sl * k + kk];
                                for (d, &v) in dbank[kk * cell..][..cell].iter_mut().zip(g) {
                                    *d = *d + wgt * v;
                                }
                            }
                        }
                    }
                    out.push((*bank, dbank));
                }
                if self.rg(*alpha) {
                    let mut da = vec![T::zero(); a.len()];
                    for s in 0..n {
                        for sl in 0..*slots {
                            let g = &dy[(s * slots + sl) * cell..][..cell];
                            for kk in 0..k {
                                da[s * sk + sl * k + kk] = g
                                    .iter()
                                    .zip(&b[kk * cell..][..cell])
                                    .map(|(&p, &q)| p * q)
                                    .sum();
                            }
                        }
                    }
                    out.push((*alpha, da));
                }
            }
            Op::MixChannelGroups { y: yv, alpha, slots } => {
                let (n, kc, h, w) = self.nodes[yv.0].value.dims4("mix_channel_groups")?;
                let sk = self.nodes[alpha.0].value.shape()[1];
                let k = sk / slots;
                let plane = (kc / k) * h * w;
                let (src, a) = (self.data(*yv), self.data(*alpha));
                if self.rg(*yv) {
                    let mut dsrc = vec![T::zero(); src.len()];
                    for s in 0..n {
                        for sl in 0..*slots {
                            let g = &dy[(s * slots + sl) * plane..][..plane];
                            for kk in 0..k {
                                let wgt = a[s * sk + sl * k + kk];
                                for (d, &v) in
                                    dsrc[(s * k + kk) * plane..][..plane].iter_mut().zip(g)
                                {
                                    *d = *d + wgt * v;
                                }
                            }
                        }
                    }
                    out.push((*yv, dsrc));
                }
                if self.rg(*alpha) {
                    let mut da = vec![T::zero(); a.len()];
                    for s in 0..n {
                        for sl in 0..*slots {
                            let g = &dy[(s * slots + sl) * plane..][..plane];
                            for kk in 0..k {
                                da[s * sk + sl * k + kk] = g
                                    .iter()
                                    .zip(&src[(s * k + kk) * plane..][..plane])
                                    .map(|(&p, &q)| p * q)
                                    .sum();
                            }
                        }
                    }
                    out.push((*alpha, da));
                }
            }
        }
        Ok(out)
    }
}
