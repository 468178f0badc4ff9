//! Feature-focus diffusion pyramid neck.
//!
//! P3/P4/P5 are aligned to P4 resolution and fused ([`FocusFuse`]), enriched
//! by parallel multi-kernel branches ([`MultiKernelMix`]) and then resampled
//! back to every scale, where each arm is concatenated with the original
//! backbone level and fused by a C2f ([`DiffusionFanout`]).

use kfg_tensor::{Pool2dParams, Scalar, Var};

use crate::error::{CoreError, Result};
use crate::nn::{dedup, C2f, Conv2d, ConvBlock};
use crate::params::{Builder, Ctx, ParamId};

/// Two-branch downsampler: 2x2 average pool (stride 1), then the channels
/// are split; one half goes through a 3x3 stride-2 block, the other through
/// a 3x3 stride-2 max pool and a 1x1 block.
#[derive(Clone, Debug)]
pub struct ADown {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub half_in: usize,
}

impl ADown {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        if !cin.is_multiple_of(2) || !cout.is_multiple_of(2) {
            return Err(CoreError::structure(
                "adown",
                format!("{name}: channel counts must be even, got {cin} -> {cout}"),
            ));
        }
        Ok(ADown {
            cv1: ConvBlock::new(b, &format!("{name}.cv1"), cin / 2, cout / 2, 3, 2)?,
            cv2: ConvBlock::new(b, &format!("{name}.cv2"), cin / 2, cout / 2, 1, 1)?,
            half_in: cin / 2,
        })
    }

    pub fn analytic_params(cin: usize, cout: usize) -> usize {
        ConvBlock::analytic_params(cin / 2, cout / 2, 3, 1) + ConvBlock::analytic_params(cin / 2, cout / 2, 1, 1)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 4 || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(CoreError::structure(
                "adown",
                format!("spatial size must be even, got {shape:?}"),
            ));
        }
        let x = ctx.g.avg_pool2d(x, Pool2dParams::new(2, 1, 0))?;
        let x1 = ctx.g.slice_channels(x, 0, self.half_in)?;
        let x2 = ctx.g.slice_channels(x, self.half_in, self.half_in)?;
        let y1 = self.cv1.forward(ctx, x1)?;
        let x2 = ctx.g.max_pool2d(x2, Pool2dParams::new(3, 2, 1))?;
        let y2 = self.cv2.forward(ctx, x2)?;
        Ok(ctx.g.concat_channels(&[y1, y2])?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.cv1.param_ids();
        ids.extend(self.cv2.param_ids());
        ids
    }
}

/// Brings P3 (downsampled), P4 (1x1) and P5 (upsampled, 1x1) to P4
/// resolution at width `cf`, concatenates and fuses with a 1x1 block.
#[derive(Clone, Debug)]
pub struct FocusFuse {
    pub down3: ADown,
    pub conv4: ConvBlock,
    pub conv5: ConvBlock,
    pub fuse: ConvBlock,
}

impl FocusFuse {
    pub fn new(b: &mut Builder, name: &str, widths: [usize; 3], cf: usize) -> Result<Self> {
        Ok(FocusFuse {
            down3: ADown::new(b, &format!("{name}.down3"), widths[0], cf)?,
            conv4: ConvBlock::new(b, &format!("{name}.conv4"), widths[1], cf, 1, 1)?,
            conv5: ConvBlock::new(b, &format!("{name}.conv5"), widths[2], cf, 1, 1)?,
            fuse: ConvBlock::new(b, &format!("{name}.fuse"), 3 * cf, cf, 1, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, p3: Var, p4: Var, p5: Var) -> Result<Var> {
        check_strides(ctx, p3, p4, p5)?;
        let a = self.down3.forward(ctx, p3)?;
        let b = self.conv4.forward(ctx, p4)?;
        let c = ctx.g.upsample_nearest(p5, 2)?;
        let c = self.conv5.forward(ctx, c)?;
        let cat = ctx.g.concat_channels(&[a, b, c])?;
        self.fuse.forward(ctx, cat)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.down3.param_ids();
        for c in [&self.conv4, &self.conv5, &self.fuse] {
            ids.extend(c.param_ids());
        }
        ids
    }
}

fn check_strides<T: Scalar>(ctx: &Ctx<'_, T>, p3: Var, p4: Var, p5: Var) -> Result<()> {
    let (s3, s4, s5) = (ctx.g.shape(p3), ctx.g.shape(p4), ctx.g.shape(p5));
    let ok = s3.len() == 4
        && s4.len() == 4
        && s5.len() == 4
        && s3[0] == s4[0]
        && s4[0] == s5[0]
        && (2..4).all(|d| s3[d] == 2 * s4[d] && s4[d] == 2 * s5[d]);
    if !ok {
        return Err(CoreError::structure(
            "focus fuse",
            format!("levels {s3:?}, {s4:?}, {s5:?} are not at strides 8/16/32"),
        ));
    }
    Ok(())
}

/// Identity plus parallel branches (a dense 1x1 conv for kernel size 1,
/// depthwise convs otherwise), summed, passed through a 1x1 block, plus a
/// residual connection around the whole mix.
#[derive(Clone, Debug)]
pub struct MultiKernelMix {
    pub branches: Vec<Conv2d>,
    pub exit: ConvBlock,
}

impl MultiKernelMix {
    pub fn new(b: &mut Builder, name: &str, c: usize, kernels: &[usize]) -> Result<Self> {
        let mut branches = Vec::with_capacity(kernels.len());
        for &k in kernels {
            if k % 2 == 0 {
                return Err(CoreError::structure(
                    "multi-kernel mix",
                    format!("{name}: kernel size {k} must be odd"),
                ));
            }
            let groups = if k == 1 { 1 } else { c };
            let conv = Conv2d::new(b, &format!("{name}.k{k}"), c, c, k, 1, groups, true)?;
            b.store_mut().value_mut(conv.bias.expect("branch bias")).data_mut().fill(0.0);
            branches.push(conv);
        }
        Ok(MultiKernelMix {
            branches,
            exit: ConvBlock::new(b, &format!("{name}.exit"), c, c, 1, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let mut terms = vec![f];
        for br in &self.branches {
            terms.push(br.forward(ctx, f)?);
        }
        let s = ctx.g.add_n(&terms)?;
        let y = self.exit.forward(ctx, s)?;
        Ok(ctx.g.add(y, f)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.branches.iter().flat_map(Conv2d::param_ids).collect();
        ids.extend(self.exit.param_ids());
        ids
    }
}

/// Resamples the focused map to strides 8/16/32 and fuses each with the
/// matching backbone level.
#[derive(Clone, Debug)]
pub struct DiffusionFanout {
    pub up3: ConvBlock,
    pub fuse3: C2f,
    pub fuse4: C2f,
    pub down5: ADown,
    pub fuse5: C2f,
}

impl DiffusionFanout {
    pub fn new(b: &mut Builder, name: &str, widths: [usize; 3], cf: usize, n: usize) -> Result<Self> {
        let [c3, c4, c5] = widths;
        Ok(DiffusionFanout {
            up3: ConvBlock::new(b, &format!("{name}.up3"), cf, c3, 1, 1)?,
            fuse3: C2f::new(b, &format!("{name}.fuse3"), 2 * c3, c3, n, false)?,
            fuse4: C2f::new(b, &format!("{name}.fuse4"), cf + c4, c4, n, false)?,
            down5: ADown::new(b, &format!("{name}.down5"), cf, c5)?,
            fuse5: C2f::new(b, &format!("{name}.fuse5"), 2 * c5, c5, n, false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: Var, levels: [Var; 3]) -> Result<[Var; 3]> {
        let [p3, p4, p5] = levels;
        let u = ctx.g.upsample_nearest(f, 2)?;
        let u = self.up3.forward(ctx, u)?;
        let cat3 = ctx.g.concat_channels(&[u, p3])?;
        let n3 = self.fuse3.forward(ctx, cat3)?;

        let cat4 = ctx.g.concat_channels(&[f, p4])?;
        let n4 = self.fuse4.forward(ctx, cat4)?;

        let d = self.down5.forward(ctx, f)?;
        let cat5 = ctx.g.concat_channels(&[d, p5])?;
        let n5 = self.fuse5.forward(ctx, cat5)?;
        Ok([n3, n4, n5])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.up3.param_ids();
        ids.extend(self.fuse3.param_ids());
        ids.extend(self.fuse4.param_ids());
        ids.extend(self.down5.param_ids());
        ids.extend(self.fuse5.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
pub struct Fdpn {
    pub focus: FocusFuse,
    pub mix: MultiKernelMix,
    pub diffuse: DiffusionFanout,
    pub cf: usize,
}

impl Fdpn {
    /// `widths` are the P3/P4/P5 channel counts, which the outputs keep.
    pub fn new(b: &mut Builder, name: &str, widths: [usize; 3], kernels: &[usize], n: usize) -> Result<Self> {
        let cf = widths[1];
        Ok(Fdpn {
            focus: FocusFuse::new(b, &format!("{name}.focus"), widths, cf)?,
            mix: MultiKernelMix::new(b, &format!("{name}.mix"), cf, kernels)?,
            diffuse: DiffusionFanout::new(b, &format!("{name}.diffuse"), widths, cf, n)?,
            cf,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, levels: [Var; 3]) -> Result<[Var; 3]> {
        let [p3, p4, p5] = levels;
        let f = self.focus.forward(ctx, p3, p4, p5)?;
        let f = self.mix.forward(ctx, f)?;
        self.diffuse.forward(ctx, f, levels)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.focus.param_ids();
        ids.extend(self.mix.param_ids());
        ids.extend(self.diffuse.param_ids());
        dedup(ids)
    }
}
