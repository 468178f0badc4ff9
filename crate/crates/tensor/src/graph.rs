//! Tape of recorded operations.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Nodes are
//! appended in execution order, so the node list is already a topological
//! order and [`Graph::backward`] simply walks it in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::conv::{conv2d_forward, Conv2dParams, ConvGeom};
use crate::kernels::norm::{self, NormStats};
use crate::kernels::pool::{self, Pool2dParams, PoolKind};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary<T> {
    Silu,
    Sigmoid,
    Relu,
    Neg,
    Square,
    Sqrt,
    Atan,
    Exp,
    Log,
    AddScalar(T),
    MulScalar(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    AvgPool {
        x: Var,
        p: Pool2dParams,
    },
    Upsample {
        x: Var,
        scale: usize,
    },
    Concat {
        xs: Vec<Var>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
        batch_stats: bool,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: NormStats<T>,
    },
    Unary {
        x: Var,
        kind: Unary<T>,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Sum {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Gather {
        x: Var,
        positions: Vec<[usize; 3]>,
    },
    MixKernels {
        alpha: Var,
        bank: Var,
        slots: usize,
    },
    MixChannelGroups {
        y: Var,
        alpha: Var,
        slots: usize,
    },
    BceWithLogits {
        x: Var,
        target: Arc<Tensor<T>>,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Concat { .. } => "concat_channels",
            Op::Narrow { .. } => "narrow",
            Op::Reshape { .. } => "reshape",
            Op::BatchNorm { .. } => "batch_norm",
            Op::GroupNorm { .. } => "group_norm",
            Op::Unary { kind, .. } => match kind {
                Unary::Silu => "silu",
                Unary::Sigmoid => "sigmoid",
                Unary::Relu => "relu",
                Unary::Neg => "neg",
                Unary::Square => "square",
                Unary::Sqrt => "sqrt",
                Unary::Atan => "atan",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::AddScalar(_) => "add_scalar",
                Unary::MulScalar(_) => "mul_scalar",
            },
            Op::Binary { kind, .. } => match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
                Binary::Min => "minimum",
                Binary::Max => "maximum",
            },
            Op::ScaleBy { .. } => "scale_by",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Linear { .. } => "linear",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Sum { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Gather { .. } => "gather_cells",
            Op::MixKernels { .. } => "mix_kernels",
            Op::MixChannelGroups { .. } => "mix_channel_groups",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Arc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into running statistics by the owner of the buffers.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub key: usize,
    pub mean: Vec<T>,
    /// Unbiased (Bessel-corrected) batch variance.
    pub var: Vec<T>,
}

/// Settings for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub struct BatchNormMode<'a, T> {
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
    pub eps: T,
    /// Use batch statistics (training) instead of running statistics.
    pub train: bool,
    /// Key under which batch statistics are reported in training mode.
    pub stat_key: Option<usize>,
}

pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    keyed: HashMap<usize, Var>,
    stat_updates: Vec<StatUpdate<T>>,
    pub(crate) sign_flip: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(TensorError::Rank {
            op,
            expected: a.len(),
            shape: b.to_vec(),
        });
    }
    for (&x, &y) in a.iter().zip(b) {
        if x != y {
            return Err(TensorError::ShapeMismatch {
                op,
                dim: "elementwise operand",
                expected: x,
                got: y,
            });
        }
    }
    Ok(())
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    sigmoid(v)
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            keyed: HashMap::new(),
            stat_updates: Vec::new(),
            sign_flip: None,
        }
    }

    /// Test hook: negate the input gradient produced by every op named `op`.
    /// Used as a negative control for gradient checks.
    pub fn inject_sign_flip(&mut self, op: &str) {
        self.sign_flip = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_requires_grad(&self, op: &Op<T>) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Conv { x, w, b, .. } => rg(x) || rg(w) || b.as_ref().is_some_and(rg),
            Op::Linear { x, w, b } => rg(x) || rg(w) || b.as_ref().is_some_and(rg),
            Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Upsample { x, .. }
            | Op::Narrow { x, .. }
            | Op::Reshape { x }
            | Op::Unary { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Sum { x }
            | Op::SumAxis { x, .. }
            | Op::Gather { x, .. }
            | Op::BceWithLogits { x, .. } => rg(x),
            Op::Concat { xs } => xs.iter().any(rg),
            Op::BatchNorm { x, gamma, beta, .. } | Op::GroupNorm { x, gamma, beta, .. } => {
                rg(x) || rg(gamma) || rg(beta)
            }
            Op::Binary { a, b, .. } => rg(a) || rg(b),
            Op::ScaleBy { x, s } => rg(x) || rg(s),
            Op::ChannelBias { x, b } => rg(x) || rg(b),
            Op::MixKernels { alpha, bank, .. } => rg(alpha) || rg(bank),
            Op::MixChannelGroups { y, alpha, .. } => rg(y) || rg(alpha),
        }
    }

    // ---- leaves -------------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf identified by an external `key` (a parameter id). Requesting the
    /// same key twice returns the same node, so every use of a shared
    /// parameter accumulates into one gradient.
    pub fn param(&mut self, key: usize, value: &Arc<Tensor<T>>, requires_grad: bool) -> Var {
        if let Some(&v) = self.keyed.get(&key) {
            return v;
        }
        let v = self.leaf_shared(Arc::clone(value), requires_grad);
        self.keyed.insert(key, v);
        v
    }

    pub(crate) fn keyed(&self) -> &HashMap<usize, Var> {
        &self.keyed
    }

    // ---- convolution and pooling ---------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        self.conv_impl(x, w, b, p, false)
    }

    /// Convolution with a different kernel per sample: `w` is
    /// `[N, Cout, Cin/groups, kh, kw]`.
    pub fn conv2d_per_sample(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        p: Conv2dParams,
    ) -> Result<Var> {
        self.conv_impl(x, w, b, p, true)
    }

    fn conv_impl(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        p: Conv2dParams,
        per_sample: bool,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), per_sample, p)?;
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [geom.cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    dim: "bias length",
                    expected: geom.cout,
                    got: numel(bs),
                });
            }
        }
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(geom.out_shape().to_vec(), out)?;
        self.push(value, Op::Conv { x, w, b, geom })
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, p: Pool2dParams) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("pool2d")?;
        match kind {
            PoolKind::Max => {
                let (out, arg, ho, wo) = pool::max_pool(self.value(x).data(), n * c, h, w, &p)?;
                self.push(Tensor::new([n, c, ho, wo], out)?, Op::MaxPool { x, arg })
            }
            PoolKind::Avg => {
                let (out, ho, wo) = pool::avg_pool(self.value(x).data(), n * c, h, w, &p)?;
                self.push(Tensor::new([n, c, ho, wo], out)?, Op::AvgPool { x, p })
            }
        }
    }

    pub fn max_pool2d(&mut self, x: Var, p: Pool2dParams) -> Result<Var> {
        self.pool2d(x, PoolKind::Max, p)
    }

    pub fn avg_pool2d(&mut self, x: Var, p: Pool2dParams) -> Result<Var> {
        self.pool2d(x, PoolKind::Avg, p)
    }

    pub fn upsample_nearest(&mut self, x: Var, scale: usize) -> Result<Var> {
        if scale == 0 {
            return Err(TensorError::invalid("upsample_nearest", "scale must be >= 1"));
        }
        let (n, c, h, w) = self.value(x).dims4("upsample_nearest")?;
        let (ho, wo) = (h * scale, w * scale);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for pl in 0..n * c {
            let plane = &src[pl * h * w..][..h * w];
            for oy in 0..ho {
                let row = &plane[(oy / scale) * w..][..w];
                out.extend((0..wo).map(|ox| row[ox / scale]));
            }
        }
        self.push(Tensor::new([n, c, ho, wo], out)?, Op::Upsample { x, scale })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        if h * w == 0 {
            return Err(TensorError::invalid("global_avg_pool", "empty spatial extent"));
        }
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::new([n, c], out)?, Op::GlobalAvgPool { x })
    }

    // ---- structural ------------------------------------------------------------

    /// Concatenate along axis 1; every other dimension must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = xs
            .first()
            .ok_or_else(|| TensorError::invalid(OP, "no inputs"))?;
        let shape0 = self.shape(*first).to_vec();
        if shape0.len() < 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 4,
                shape: shape0,
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != shape0.len() {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: shape0.len(),
                    shape: s.to_vec(),
                });
            }
            for (d, (&a, &b)) in shape0.iter().zip(s).enumerate() {
                if d != 1 && a != b {
                    return Err(TensorError::ShapeMismatch {
                        op: OP,
                        dim: ["batch", "channels", "height", "width"].get(d).copied().unwrap_or("trailing"),
                        expected: a,
                        got: b,
                    });
                }
            }
            total += s[1];
        }
        let n = shape0[0];
        let inner = numel(&shape0[2..]);
        let mut out = Vec::with_capacity(n * total * inner);
        for s in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[s * c * inner..][..c * inner]);
            }
        }
        let mut shape = shape0;
        shape[1] = total;
        self.push(Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec() })
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        self.push(value, Op::Narrow { x, axis, start })
    }

    /// Channels `[start, start + len)` of an `N, C, ...` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.narrow(x, 1, start, len)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel(shape) != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                dim: "element count",
                expected: t.numel(),
                got: numel(shape),
            });
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        self.push(value, Op::Reshape { x })
    }

    // ---- normalization -------------------------------------------------------

    fn check_channel_vec(&self, op: &'static str, v: Var, c: usize, dim: &'static str) -> Result<()> {
        let s = self.shape(v);
        if s != [c] {
            return Err(TensorError::ShapeMismatch {
                op,
                dim,
                expected: c,
                got: numel(s),
            });
        }
        Ok(())
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        self.check_channel_vec(OP, gamma, c, "gamma length")?;
        self.check_channel_vec(OP, beta, c, "beta length")?;
        if mode.running_mean.len() != c || mode.running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "running statistics length",
                expected: c,
                got: mode.running_mean.len(),
            });
        }
        let hw = h * w;
        let (mean, var) = if mode.train {
            let (mean, var) = norm::channel_stats(self.value(x).data(), n, c, hw);
            if let Some(key) = mode.stat_key {
                let m = n * hw;
                let bessel = if m > 1 {
                    T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap()
                } else {
                    T::one()
                };
                self.stat_updates.push(StatUpdate {
                    key,
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * bessel).collect(),
                });
            }
            (mean, var)
        } else {
            (mode.running_mean.to_vec(), mode.running_var.to_vec())
        };
        let stats = NormStats {
            rstd: var.iter().map(|&v| T::one() / (v + mode.eps).sqrt()).collect(),
            mean,
        };
        let y = norm::channel_affine(
            self.value(x).data(),
            n,
            c,
            hw,
            &stats,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        self.push(
            Tensor::new([n, c, h, w], y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                batch_stats: mode.train,
            },
        )
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        const OP: &str = "group_norm";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::invalid(
                OP,
                format!("channels {c} not divisible by groups {groups}"),
            ));
        }
        self.check_channel_vec(OP, gamma, c, "gamma length")?;
        self.check_channel_vec(OP, beta, c, "beta length")?;
        let (y, stats) = norm::group_norm_forward(
            self.value(x).data(),
            n,
            c,
            h * w,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        self.push(
            Tensor::new([n, c, h, w], y)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        )
    }

    // ---- elementwise ---------------------------------------------------------

    fn unary(&mut self, x: Var, kind: Unary<T>) -> Result<Var> {
        let f: Box<dyn Fn(T) -> T> = match kind {
            Unary::Silu => Box::new(|v| v * sigmoid(v)),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Relu => Box::new(|v: T| v.max(T::zero())),
            Unary::Neg => Box::new(|v: T| -v),
            Unary::Square => Box::new(|v| v * v),
            Unary::Sqrt => Box::new(|v: T| v.sqrt()),
            Unary::Atan => Box::new(|v: T| v.atan()),
            Unary::Exp => Box::new(|v: T| v.exp()),
            Unary::Log => Box::new(|v: T| v.ln()),
            Unary::AddScalar(c) => Box::new(move |v| v + c),
            Unary::MulScalar(c) => Box::new(move |v| v * c),
        };
        let value = self.value(x).map(f);
        self.push(value, Op::Unary { x, kind })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn atan(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Atan)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Unary::AddScalar(c))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Unary::MulScalar(c))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let op_name = Op::<T>::Binary { a, b, kind }.name();
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
            Binary::Min => |x, y| if y < x { y } else { x },
            Binary::Max => |x, y| if y > x { y } else { x },
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Binary { a, b, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Min)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Max)
    }

    /// Sum of several same-shape tensors, left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| TensorError::invalid("add", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Multiply every element by a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self
            .value(s)
            .item()
            .ok_or_else(|| TensorError::invalid("scale_by", "scale must have one element"))?;
        let value = self.value(x).map(|v| v * sv);
        self.push(value, Op::ScaleBy { x, s })
    }

    /// Add `b[c]` to channel `c` of an `N, C, ...` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        const OP: &str = "channel_bias";
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 4,
                shape,
            });
        }
        self.check_channel_vec(OP, b, shape[1], "bias length")?;
        let inner = numel(&shape[2..]);
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[(i / inner) % shape[1]])
            .collect();
        self.push(Tensor::new(shape, data)?, Op::ChannelBias { x, b })
    }

    // ---- reductions and softmax ------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(TensorError::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        self.check_axis(name, x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..len).map(|k| (src[idx(k)] - m).exp()).sum();
                let lz = z.ln();
                for k in 0..len {
                    out[idx(k)] = if log {
                        src[idx(k)] - m - lz
                    } else {
                        (src[idx(k)] - m).exp() / z
                    };
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        self.push(value, op)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.mul_scalar(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Reduce `axis` by summation, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[(o * len + k) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis })
    }

    // ---- dense layers ---------------------------------------------------------

    /// `y = x w^T + b` with `x: [N, Din]`, `w: [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (n, din) = match *self.shape(x) {
            [n, d] => (n, d),
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: 2,
                    shape: self.shape(x).to_vec(),
                })
            }
        };
        let (dout, wdin) = match *self.shape(w) {
            [o, i] => (o, i),
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: 2,
                    shape: self.shape(w).to_vec(),
                })
            }
        };
        if wdin != din {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "input features",
                expected: wdin,
                got: din,
            });
        }
        if let Some(b) = b {
            self.check_channel_vec(OP, b, dout, "bias length")?;
        }
        let mut out = vec![T::zero(); n * dout];
        gemm(
            Mat::new(self.value(x).data(), n, din),
            Mat::new(self.value(w).data(), dout, din).t(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        self.push(Tensor::new([n, dout], out)?, Op::Linear { x, w, b })
    }

    // ---- detection helpers ----------------------------------------------------

    /// Rows `x[n, :, i, j]` for each `(n, i, j)`, stacked into `[M, C]`.
    pub fn gather_cells(&mut self, x: Var, positions: &[[usize; 3]]) -> Result<Var> {
        const OP: &str = "gather_cells";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(positions.len() * c);
        for &[s, i, j] in positions {
            if s >= n || i >= h || j >= w {
                return Err(TensorError::invalid(
                    OP,
                    format!("position ({s},{i},{j}) outside ({n},{h},{w})"),
                ));
            }
            out.extend((0..c).map(|ch| src[((s * c + ch) * h + i) * w + j]));
        }
        self.push(
            Tensor::new([positions.len(), c], out)?,
            Op::Gather {
                x,
                positions: positions.to_vec(),
            },
        )
    }

    /// Elementwise binary cross-entropy of logits against fixed targets.
    pub fn bce_with_logits(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        same_shape("bce_with_logits", self.shape(x), target.shape())?;
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&v, &t)| v.max(T::zero()) - v * t + (T::one() + (-v.abs()).exp()).ln())
            .collect();
        let value = Tensor::new(target.shape().to_vec(), data)?;
        self.push(
            value,
            Op::BceWithLogits {
                x,
                target: Arc::new(target),
            },
        )
    }

    // ---- kernel mixtures --------------------------------------------------------

    /// Mix a bank of `K` kernels per sample and per output slot.
    ///
    /// `alpha: [N, slots * K]`, `bank: [K, c, rest...]` produces
    /// `[N, slots * c, rest...]` where slot `s` of sample `n` is
    /// `sum_k alpha[n, s * K + k] * bank[k]`.
    pub fn mix_kernels(&mut self, alpha: Var, bank: Var, slots: usize) -> Result<Var> {
        const OP: &str = "mix_kernels";
        let bshape = self.shape(bank).to_vec();
        if bshape.len() < 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 5,
                shape: bshape,
            });
        }
        let k = bshape[0];
        let (n, sk) = match *self.shape(alpha) {
            [n, sk] => (n, sk),
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: 2,
                    shape: self.shape(alpha).to_vec(),
                })
            }
        };
        if slots == 0 || sk != slots * k {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "mixture weights (slots * K)",
                expected: slots * k,
                got: sk,
            });
        }
        let cell = numel(&bshape[1..]);
        let a = self.value(alpha).data();
        let b = self.value(bank).data();
        let mut out = vec![T::zero(); n * slots * cell];
        for s in 0..n {
            for sl in 0..slots {
                let dst = &mut out[(s * slots + sl) * cell..][..cell];
                for kk in 0..k {
                    let wgt = a[s * sk + sl * k + kk];
                    for (d, &v) in dst.iter_mut().zip(&b[kk * cell..][..cell]) {
                        *d = *d + wgt * v;
                    }
                }
            }
        }
        let mut shape = vec![n, slots * bshape[1]];
        shape.extend_from_slice(&bshape[2..]);
        self.push(Tensor::new(shape, out)?, Op::MixKernels { alpha, bank, slots })
    }

    /// Mix per-kernel responses after convolution.
    ///
    /// `y: [N, K * c, H, W]` holds the response of each of `K` kernels; with
    /// `alpha: [N, slots * K]` the result is `[N, slots * c, H, W]`.
    pub fn mix_channel_groups(&mut self, y: Var, alpha: Var, slots: usize) -> Result<Var> {
        const OP: &str = "mix_channel_groups";
        let (n, kc, h, w) = self.value(y).dims4(OP)?;
        let (an, sk) = match *self.shape(alpha) {
            [an, sk] => (an, sk),
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: 2,
                    shape: self.shape(alpha).to_vec(),
                })
            }
        };
        if an != n {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "batch",
                expected: n,
                got: an,
            });
        }
        if slots == 0 || sk % slots != 0 || kc % (sk / slots).max(1) != 0 {
            return Err(TensorError::invalid(
                OP,
                format!("cannot split {kc} channels into {sk} / {slots} kernels"),
            ));
        }
        let k = sk / slots;
        let c = kc / k;
        let plane = c * h * w;
        let src = self.value(y).data();
        let a = self.value(alpha).data();
        let mut out = vec![T::zero(); n * slots * plane];
        for s in 0..n {
            for sl in 0..slots {
                let dst = &mut out[(s * slots + sl) * plane..][..plane];
                for kk in 0..k {
                    let wgt = a[s * sk + sl * k + kk];
                    for (d, &v) in dst.iter_mut().zip(&src[(s * k + kk) * plane..][..plane]) {
                        *d = *d + wgt * v;
                    }
                }
            }
        }
        self.push(
            Tensor::new([n, slots * c, h, w], out)?,
            Op::MixChannelGroups { y, alpha, slots },
        )
    }
}
