//! YOLOv8 building blocks: Conv (conv + BN + SiLU), Bottleneck, C2f, SPPF
//! and the decoupled detection head.

use kfg_tensor::{Conv2dParams, Pool2dParams, Scalar, Var};

use crate::error::{CoreError, Result};
use crate::kw::{KwConv, KwSettings, Warehouse};
use crate::params::{Builder, Ctx, ParamId, ParamStore};

/// A bare convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: Conv2dParams,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(CoreError::structure(
                "conv",
                format!("{name}: groups {groups} must divide {cin} and {cout}"),
            ));
        }
        let fan_in = cin / groups * k * k;
        let weight = b.uniform(format!("{name}.weight"), &[cout, cin / groups, k, k], fan_in)?;
        let bias = if bias {
            Some(b.uniform(format!("{name}.bias"), &[cout], fan_in)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            params: Conv2dParams::new(stride, k / 2).groups(groups),
            cin,
            cout,
            k,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        Ok(ctx.g.conv2d(x, w, b, self.params)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.bias.into_iter().chain([self.weight]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, c: usize) -> Result<Self> {
        let gamma = b.full(format!("{name}.weight"), &[c], 1.0)?;
        let beta = b.zeros(format!("{name}.bias"), &[c])?;
        let (running_mean, running_var) = b.running_stats(name, c)?;
        Ok(BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Convolution without bias, batch norm, SiLU. Padding is `k / 2`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Self::grouped(b, name, cin, cout, k, stride, 1)
    }

    pub fn grouped(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv2d::new(b, &format!("{name}.conv"), cin, cout, k, stride, groups, false)?,
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn analytic_params(cin: usize, cout: usize, k: usize, groups: usize) -> usize {
        cin / groups * cout * k * k + 2 * cout
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.g.silu(y)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv.param_ids();
        ids.extend(self.bn.param_ids());
        ids
    }
}

/// A 3x3 convolution slot that is either a plain [`ConvBlock`] or a
/// warehouse-backed [`KwConv`].
#[derive(Clone, Debug)]
pub enum ConvUnit {
    Plain(ConvBlock),
    Kw(KwConv),
}

impl ConvUnit {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            ConvUnit::Plain(c) => c.forward(ctx, x),
            ConvUnit::Kw(c) => c.forward(ctx, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            ConvUnit::Plain(c) => c.param_ids(),
            ConvUnit::Kw(c) => c.param_ids(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: ConvUnit,
    pub cv2: ConvUnit,
    pub shortcut: bool,
}

impl Bottleneck {
    /// Two 3x3 blocks `cin -> hidden -> cout`.
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        hidden: usize,
        shortcut: bool,
    ) -> Result<Self> {
        check_shortcut(name, cin, cout, shortcut)?;
        Ok(Bottleneck {
            cv1: ConvUnit::Plain(ConvBlock::new(b, &format!("{name}.cv1"), cin, hidden, 3, 1)?),
            cv2: ConvUnit::Plain(ConvBlock::new(b, &format!("{name}.cv2"), hidden, cout, 3, 1)?),
            shortcut,
        })
    }

    /// Both convolutions drawn from `warehouse`.
    pub fn kw(
        b: &mut Builder,
        name: &str,
        c: usize,
        shortcut: bool,
        warehouse: &mut Warehouse,
        kw: &KwSettings,
    ) -> Result<Self> {
        Ok(Bottleneck {
            cv1: ConvUnit::Kw(KwConv::new(b, &format!("{name}.cv1"), warehouse, c, c, 1, kw)?),
            cv2: ConvUnit::Kw(KwConv::new(b, &format!("{name}.cv2"), warehouse, c, c, 1, kw)?),
            shortcut,
        })
    }

    pub fn analytic_params(cin: usize, cout: usize, hidden: usize) -> usize {
        ConvBlock::analytic_params(cin, hidden, 3, 1) + ConvBlock::analytic_params(hidden, cout, 3, 1)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(ctx, x)?;
        let y = self.cv2.forward(ctx, y)?;
        if self.shortcut {
            Ok(ctx.g.add(x, y)?)
        } else {
            Ok(y)
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.cv1.param_ids();
        ids.extend(self.cv2.param_ids());
        ids
    }
}

fn check_shortcut(name: &str, cin: usize, cout: usize, shortcut: bool) -> Result<()> {
    if shortcut && cin != cout {
        return Err(CoreError::structure(
            "bottleneck",
            format!("{name}: shortcut needs equal channels, got {cin} -> {cout}"),
        ));
    }
    Ok(())
}

/// Split into two halves, run `n` bottlenecks on the second half, concatenate
/// every intermediate and fuse with a 1x1 block. The C2f-KW form (built by
/// [`C2f::kw`]) draws every bottleneck convolution from a kernel warehouse.
#[derive(Clone, Debug)]
pub struct C2f {
    pub cv1: ConvBlock,
    pub blocks: Vec<Bottleneck>,
    pub cv2: ConvBlock,
    pub hidden: usize,
    /// One shared warehouse, or one per convolution when sharing is off.
    pub warehouses: Vec<Warehouse>,
}

impl C2f {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, n: usize, shortcut: bool) -> Result<Self> {
        let hidden = cout / 2;
        let blocks = (0..n)
            .map(|i| Bottleneck::new(b, &format!("{name}.m.{i}"), hidden, hidden, hidden, shortcut))
            .collect::<Result<_>>()?;
        Self::assemble(b, name, cin, cout, n, blocks, Vec::new())
    }

    /// C2f-KW: all `2n` bottleneck convolutions share one warehouse.
    pub fn kw(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        n: usize,
        shortcut: bool,
        kw: &KwSettings,
    ) -> Result<Self> {
        let hidden = cout / 2;
        let mut blocks = Vec::with_capacity(n);
        let mut warehouses = Vec::new();
        if kw.share {
            let mut wh = Warehouse::for_members(b, &format!("{name}.warehouse"), kw.k, 2 * n, hidden, hidden, 3)?;
            for i in 0..n {
                blocks.push(Bottleneck::kw(b, &format!("{name}.m.{i}"), hidden, shortcut, &mut wh, kw)?);
            }
            warehouses.push(wh);
        } else {
            // Same kernel cells as the shared layout, one private bank per convolution.
            let slots = crate::kw::slots_for(kw.k, 2 * n, hidden);
            for i in 0..n {
                let p = format!("{name}.m.{i}");
                let mut units = Vec::with_capacity(2);
                for cv in ["cv1", "cv2"] {
                    let mut wh = Warehouse::new(b, &format!("{p}.{cv}.warehouse"), kw.k, [hidden / slots, hidden, 3, 3], hidden)?;
                    units.push(ConvUnit::Kw(KwConv::new(b, &format!("{p}.{cv}"), &mut wh, hidden, hidden, 1, kw)?));
                    warehouses.push(wh);
                }
                let cv2 = units.pop().expect("two units");
                let cv1 = units.pop().expect("two units");
                blocks.push(Bottleneck { cv1, cv2, shortcut });
            }
        }
        Self::assemble(b, name, cin, cout, n, blocks, warehouses)
    }

    fn assemble(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        n: usize,
        blocks: Vec<Bottleneck>,
        warehouses: Vec<Warehouse>,
    ) -> Result<Self> {
        let hidden = cout / 2;
        if hidden == 0 {
            return Err(CoreError::structure("c2f", format!("{name}: output width {cout} too small")));
        }
        Ok(C2f {
            cv1: ConvBlock::new(b, &format!("{name}.cv1"), cin, 2 * hidden, 1, 1)?,
            blocks,
            cv2: ConvBlock::new(b, &format!("{name}.cv2"), (2 + n) * hidden, cout, 1, 1)?,
            hidden,
            warehouses,
        })
    }

    pub fn analytic_params(cin: usize, cout: usize, n: usize) -> usize {
        let h = cout / 2;
        ConvBlock::analytic_params(cin, 2 * h, 1, 1)
            + n * Bottleneck::analytic_params(h, h, h)
            + ConvBlock::analytic_params((2 + n) * h, cout, 1, 1)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(ctx, x)?;
        let mut parts = vec![
            ctx.g.slice_channels(y, 0, self.hidden)?,
            ctx.g.slice_channels(y, self.hidden, self.hidden)?,
        ];
        for m in &self.blocks {
            let last = *parts.last().expect("two halves");
            parts.push(m.forward(ctx, last)?);
        }
        let cat = ctx.g.concat_channels(&parts)?;
        self.cv2.forward(ctx, cat)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.cv1.param_ids();
        for m in &self.blocks {
            ids.extend(m.param_ids());
        }
        ids.extend(self.cv2.param_ids());
        dedup(ids)
    }
}

/// 1x1 reduce, three chained 5x5 max-pools, concat of all four, 1x1 fuse.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub pool: Pool2dParams,
}

impl Sppf {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let hidden = cin / 2;
        Ok(Sppf {
            cv1: ConvBlock::new(b, &format!("{name}.cv1"), cin, hidden, 1, 1)?,
            cv2: ConvBlock::new(b, &format!("{name}.cv2"), 4 * hidden, cout, 1, 1)?,
            pool: Pool2dParams::new(5, 1, 2),
        })
    }

    pub fn analytic_params(cin: usize, cout: usize) -> usize {
        let h = cin / 2;
        ConvBlock::analytic_params(cin, h, 1, 1) + ConvBlock::analytic_params(4 * h, cout, 1, 1)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let x = self.cv1.forward(ctx, x)?;
        let y1 = ctx.g.max_pool2d(x, self.pool)?;
        let y2 = ctx.g.max_pool2d(y1, self.pool)?;
        let y3 = ctx.g.max_pool2d(y2, self.pool)?;
        let cat = ctx.g.concat_channels(&[x, y1, y2, y3])?;
        self.cv2.forward(ctx, cat)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.cv1.param_ids();
        ids.extend(self.cv2.param_ids());
        ids
    }
}

/// Raw head maps of one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelOut {
    /// `[N, 4 * reg_max, H, W]` distance-distribution logits (l, t, r, b).
    pub reg: Var,
    /// `[N, nc, H, W]` class logits.
    pub cls: Var,
    pub stride: usize,
}

pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Initial classification bias: prior of about five objects per image
/// spread over the level's cells.
pub(crate) fn cls_bias_prior(nc: usize, imgsz: usize, stride: usize) -> f32 {
    let cells = (imgsz as f64 / stride as f64).powi(2);
    (5.0 / nc as f64 / cells).ln() as f32
}

#[derive(Clone, Debug)]
pub struct V8Level {
    pub reg: [ConvBlock; 2],
    pub reg_out: Conv2d,
    pub cls: [ConvBlock; 2],
    pub cls_out: Conv2d,
}

/// Decoupled head: per level, independent regression and classification
/// branches of two 3x3 blocks plus a 1x1 projection.
#[derive(Clone, Debug)]
pub struct DetectHeadV8 {
    pub levels: Vec<V8Level>,
    pub nc: usize,
    pub reg_max: usize,
}

impl DetectHeadV8 {
    pub fn new(
        b: &mut Builder,
        name: &str,
        nc: usize,
        reg_max: usize,
        widths: &[usize],
        imgsz: usize,
    ) -> Result<Self> {
        let (c2, c3) = Self::branch_widths(nc, reg_max, widths);
        let mut levels = Vec::with_capacity(widths.len());
        for (i, &ch) in widths.iter().enumerate() {
            let p = format!("{name}.{i}");
            let reg = [
                ConvBlock::new(b, &format!("{p}.reg.0"), ch, c2, 3, 1)?,
                ConvBlock::new(b, &format!("{p}.reg.1"), c2, c2, 3, 1)?,
            ];
            let reg_out = Conv2d::new(b, &format!("{p}.reg.2"), c2, 4 * reg_max, 1, 1, 1, true)?;
            let cls = [
                ConvBlock::new(b, &format!("{p}.cls.0"), ch, c3, 3, 1)?,
                ConvBlock::new(b, &format!("{p}.cls.1"), c3, c3, 3, 1)?,
            ];
            let cls_out = Conv2d::new(b, &format!("{p}.cls.2"), c3, nc, 1, 1, 1, true)?;
            init_head_biases(b, &reg_out, &cls_out, nc, imgsz, STRIDES[i]);
            levels.push(V8Level {
                reg,
                reg_out,
                cls,
                cls_out,
            });
        }
        Ok(DetectHeadV8 { levels, nc, reg_max })
    }

    /// Hidden widths of the regression and classification branches, as in
    /// the YOLOv8 release.
    pub fn branch_widths(nc: usize, reg_max: usize, widths: &[usize]) -> (usize, usize) {
        let c0 = widths[0];
        ((c0 / 4).max(4 * reg_max).max(16), c0.max(nc.min(100)))
    }

    pub fn analytic_params(nc: usize, reg_max: usize, widths: &[usize]) -> usize {
        let (c2, c3) = Self::branch_widths(nc, reg_max, widths);
        widths
            .iter()
            .map(|&ch| {
                ConvBlock::analytic_params(ch, c2, 3, 1)
                    + ConvBlock::analytic_params(c2, c2, 3, 1)
                    + c2 * 4 * reg_max
                    + 4 * reg_max
                    + ConvBlock::analytic_params(ch, c3, 3, 1)
                    + ConvBlock::analytic_params(c3, c3, 3, 1)
                    + c3 * nc
                    + nc
            })
            .sum()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, xs: &[Var]) -> Result<Vec<LevelOut>> {
        check_levels("detect head", xs.len(), self.levels.len())?;
        let mut out = Vec::with_capacity(xs.len());
        for (i, (lvl, &x)) in self.levels.iter().zip(xs).enumerate() {
            let r = lvl.reg[0].forward(ctx, x)?;
            let r = lvl.reg[1].forward(ctx, r)?;
            let reg = lvl.reg_out.forward(ctx, r)?;
            let c = lvl.cls[0].forward(ctx, x)?;
            let c = lvl.cls[1].forward(ctx, c)?;
            let cls = lvl.cls_out.forward(ctx, c)?;
            out.push(LevelOut {
                reg,
                cls,
                stride: STRIDES[i],
            });
        }
        Ok(out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.levels {
            for c in l.reg.iter().chain(&l.cls) {
                ids.extend(c.param_ids());
            }
            ids.extend(l.reg_out.param_ids());
            ids.extend(l.cls_out.param_ids());
        }
        ids
    }
}

pub(crate) fn init_head_biases(b: &mut Builder, reg_out: &Conv2d, cls_out: &Conv2d, nc: usize, imgsz: usize, stride: usize) {
    let store = b.store_mut();
    if let Some(id) = reg_out.bias {
        store.value_mut(id).data_mut().fill(1.0);
    }
    if let Some(id) = cls_out.bias {
        store.value_mut(id).data_mut().fill(cls_bias_prior(nc, imgsz, stride));
    }
}

pub(crate) fn check_levels(block: &'static str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(CoreError::structure(
            block,
            format!("expected {expected} pyramid levels, got {got}"),
        ));
    }
    Ok(())
}

/// Total scalars behind `ids`, each storage once.
pub fn count_params<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId]) -> usize {
    dedup(ids.to_vec()).iter().map(|&id| store.value(id).numel()).sum()
}

pub(crate) fn dedup(mut ids: Vec<ParamId>) -> Vec<ParamId> {
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Expected bin index under the softmax of `logits`.
pub fn dfl_expectation<T: Scalar>(logits: &[T]) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    let mut acc = T::zero();
    for (i, &l) in logits.iter().enumerate() {
        let e = (l - m).exp();
        z = z + e;
        acc = acc + e * T::from_usize(i).unwrap();
    }
    acc / z
}
