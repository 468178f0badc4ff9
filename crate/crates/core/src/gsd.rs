//! Shared group-normalized detection head.
//!
//! Each level is aligned to width `cs` by its own 1x1 GN block, then passes
//! through one pair of 3x3 GN blocks whose parameters are the same storage
//! for every level. Per-level 1x1 projections produce box distributions and
//! class logits; box outputs are multiplied by a learnable per-level scale.

use kfg_tensor::{Scalar, Var};

use crate::error::Result;
use crate::nn::{check_levels, dedup, init_head_biases, Conv2d, DetectHeadV8, LevelOut, STRIDES};
use crate::params::{Builder, Ctx, ParamId, ParamStore};

pub const GN_GROUPS: usize = 16;
pub const GN_EPS: f64 = 1e-5;

/// Largest divisor of `c` not above `max`.
pub fn clamp_groups(c: usize, max: usize) -> usize {
    (1..=max.min(c).max(1)).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}

/// Convolution without bias, group norm, SiLU.
#[derive(Clone, Debug)]
pub struct GnConv {
    pub conv: Conv2d,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GnConv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(GnConv {
            conv: Conv2d::new(b, &format!("{name}.conv"), cin, cout, k, 1, 1, false)?,
            gamma: b.full(format!("{name}.gn.weight"), &[cout], 1.0)?,
            beta: b.zeros(format!("{name}.gn.bias"), &[cout])?,
            groups: clamp_groups(cout, GN_GROUPS),
        })
    }

    pub fn analytic_params(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + 2 * cout
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let (g, bt) = (ctx.param(self.gamma), ctx.param(self.beta));
        let y = ctx.g.group_norm(y, self.groups, g, bt, T::from_f64_lossy(GN_EPS))?;
        Ok(ctx.g.silu(y)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv.param_ids();
        ids.extend([self.gamma, self.beta]);
        ids
    }
}

#[derive(Clone, Debug)]
pub struct GsdHead {
    pub align: Vec<GnConv>,
    pub stem: [GnConv; 2],
    pub reg: Vec<Conv2d>,
    pub cls: Vec<Conv2d>,
    pub scales: Vec<ParamId>,
    pub cs: usize,
    pub nc: usize,
    pub reg_max: usize,
}

impl GsdHead {
    pub fn new(
        b: &mut Builder,
        name: &str,
        nc: usize,
        reg_max: usize,
        widths: &[usize],
        cs: usize,
        imgsz: usize,
    ) -> Result<Self> {
        let mut align = Vec::new();
        let mut reg = Vec::new();
        let mut cls = Vec::new();
        let mut scales = Vec::new();
        for (i, &ch) in widths.iter().enumerate() {
            align.push(GnConv::new(b, &format!("{name}.align.{i}"), ch, cs, 1)?);
        }
        let stem = [
            GnConv::new(b, &format!("{name}.stem.0"), cs, cs, 3)?,
            GnConv::new(b, &format!("{name}.stem.1"), cs, cs, 3)?,
        ];
        for (i, &stride) in STRIDES.iter().enumerate().take(widths.len()) {
            let r = Conv2d::new(b, &format!("{name}.reg.{i}"), cs, 4 * reg_max, 1, 1, 1, true)?;
            let c = Conv2d::new(b, &format!("{name}.cls.{i}"), cs, nc, 1, 1, 1, true)?;
            init_head_biases(b, &r, &c, nc, imgsz, stride);
            reg.push(r);
            cls.push(c);
            scales.push(b.full(format!("{name}.scale.{i}"), &[1], 1.0)?);
        }
        Ok(GsdHead {
            align,
            stem,
            reg,
            cls,
            scales,
            cs,
            nc,
            reg_max,
        })
    }

    pub fn analytic_params(nc: usize, reg_max: usize, widths: &[usize], cs: usize) -> usize {
        let shared = 2 * GnConv::analytic_params(cs, cs, 3);
        let per_level: usize = widths
            .iter()
            .map(|&ch| GnConv::analytic_params(ch, cs, 1) + cs * 4 * reg_max + 4 * reg_max + cs * nc + nc + 1)
            .sum();
        shared + per_level
    }

    /// Per-level box maps before the scale is applied, plus class maps.
    pub fn forward_unscaled<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, xs: &[Var]) -> Result<Vec<LevelOut>> {
        check_levels("gsd head", xs.len(), self.align.len())?;
        let mut out = Vec::with_capacity(xs.len());
        for (i, &x) in xs.iter().enumerate() {
            let a = self.align[i].forward(ctx, x)?;
            let s = self.stem[0].forward(ctx, a)?;
            let s = self.stem[1].forward(ctx, s)?;
            out.push(LevelOut {
                reg: self.reg[i].forward(ctx, s)?,
                cls: self.cls[i].forward(ctx, s)?,
                stride: STRIDES[i],
            });
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, xs: &[Var]) -> Result<Vec<LevelOut>> {
        let mut out = self.forward_unscaled(ctx, xs)?;
        for (lvl, &s) in out.iter_mut().zip(&self.scales) {
            let s = ctx.param(s);
            lvl.reg = ctx.g.scale_by(lvl.reg, s)?;
        }
        Ok(out)
    }

    pub fn stem_ids(&self) -> Vec<ParamId> {
        self.stem.iter().flat_map(GnConv::param_ids).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.align.iter().flat_map(GnConv::param_ids).collect();
        ids.extend(self.stem_ids());
        for (r, c) in self.reg.iter().zip(&self.cls) {
            ids.extend(r.param_ids());
            ids.extend(c.param_ids());
        }
        ids.extend(&self.scales);
        dedup(ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadComparison {
    pub decoupled: usize,
    pub shared: usize,
    /// `1 - shared / decoupled`.
    pub reduction: f64,
}

pub fn head_param_compare<T: Scalar>(
    decoupled: &DetectHeadV8,
    shared: &GsdHead,
    store: &ParamStore<T>,
) -> HeadComparison {
    let a = crate::nn::count_params(store, &decoupled.param_ids());
    let b = crate::nn::count_params(store, &shared.param_ids());
    HeadComparison {
        decoupled: a,
        shared: b,
        reduction: 1.0 - b as f64 / a as f64,
    }
}
