//! Kernel-warehouse dynamic convolution.
//!
//! A [`Warehouse`] stores `K` kernel cells of shape `(cell_out, Cin, k, k)`.
//! A member layer with `Cout = slots * cell_out` output channels builds the
//! kernel for each slot of `cell_out` channels as an input-dependent mixture
//! `sum_k alpha[slot, k] * W_k`, where `alpha` comes from the layer's own
//! [`Wgm`]. With one slot this is exactly `Y = sum_k alpha_k (W_k * X) + b`.
//!
//! Cells smaller than the full kernel let a warehouse with few members keep
//! the parameter count of the plain convolutions it replaces: `slots` is
//! chosen so that `slots * members == K` whenever that divides evenly.

use kfg_tensor::{Conv2dParams, Scalar, Var};

use crate::error::{CoreError, Result};
use crate::nn::BatchNorm;
use crate::params::{Builder, Ctx, ParamId, ParamStore};

/// Where the mixture is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KwRoute {
    /// Mix the kernels per sample, then run one convolution.
    #[default]
    MixKernels,
    /// Convolve with every kernel, then mix the responses.
    MixResponses,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KwSettings {
    /// Kernels per warehouse.
    pub k: usize,
    /// WGM reduction ratio.
    pub r: usize,
    pub route: KwRoute,
    /// Share one warehouse between the convolutions of a block; when off
    /// every convolution gets a private bank with the same cells.
    pub share: bool,
}

impl Default for KwSettings {
    fn default() -> Self {
        KwSettings {
            k: 4,
            r: 4,
            route: KwRoute::MixKernels,
            share: true,
        }
    }
}

/// Slots per member so that `members` layers together draw on `k` cells
/// without growing the parameter count; 1 when it does not divide evenly.
pub fn slots_for(k: usize, members: usize, cout: usize) -> usize {
    if members == 0 || k < members || !k.is_multiple_of(members) {
        return 1;
    }
    let s = k / members;
    if cout.is_multiple_of(s) {
        s
    } else {
        1
    }
}

#[derive(Clone, Debug)]
pub struct Warehouse {
    pub name: String,
    /// `[K, cell_out, Cin, k, k]`.
    pub kernels: ParamId,
    pub k: usize,
    pub cell: [usize; 4],
    /// Output width of member layers.
    pub out: usize,
    members: Vec<String>,
}

impl Warehouse {
    pub fn new(b: &mut Builder, name: &str, k: usize, cell: [usize; 4], out: usize) -> Result<Self> {
        if k == 0 {
            return Err(CoreError::Warehouse {
                warehouse: name.to_string(),
                msg: "K must be at least 1".into(),
            });
        }
        if cell[0] == 0 || !out.is_multiple_of(cell[0]) {
            return Err(CoreError::Warehouse {
                warehouse: name.to_string(),
                msg: format!("member width {out} is not a multiple of cell width {}", cell[0]),
            });
        }
        let fan_in = cell[1] * cell[2] * cell[3];
        let kernels = b.uniform(format!("{name}.kernels"), &[k, cell[0], cell[1], cell[2], cell[3]], fan_in)?;
        Ok(Warehouse {
            name: name.to_string(),
            kernels,
            k,
            cell,
            out,
            members: Vec::new(),
        })
    }

    /// Warehouse sized for `members` layers of shape `cin -> cout`, `ksize`.
    pub fn for_members(
        b: &mut Builder,
        name: &str,
        k: usize,
        members: usize,
        cout: usize,
        cin: usize,
        ksize: usize,
    ) -> Result<Self> {
        let slots = slots_for(k, members, cout);
        Self::new(b, name, k, [cout / slots, cin, ksize, ksize], cout)
    }

    pub fn slots(&self) -> usize {
        self.out / self.cell[0]
    }

    pub fn members(&self) -> &[String] {
        &self.members
    }

    /// Scalars in one kernel cell.
    pub fn kernel_numel(&self) -> usize {
        self.cell.iter().product()
    }

    fn register(&mut self, b: &mut Builder, member: &str) -> Result<()> {
        b.alias(format!("{member}.kernels"), self.kernels)?;
        self.members.push(member.to_string());
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarehouseReport {
    /// `K * |kernel|`: storage actually allocated.
    pub raw: usize,
    /// `raw / members`.
    pub amortized: f64,
    /// Storage if every member had a private bank of `K` cells.
    pub non_shared: usize,
    pub saving_factor: f64,
}

pub fn warehouse_param_report<T: Scalar>(wh: &Warehouse, store: &ParamStore<T>) -> Result<WarehouseReport> {
    let m = wh.members.len();
    if m == 0 {
        return Err(CoreError::Warehouse {
            warehouse: wh.name.clone(),
            msg: "no member layers".into(),
        });
    }
    let raw = store.value(wh.kernels).numel();
    Ok(WarehouseReport {
        raw,
        amortized: raw as f64 / m as f64,
        non_shared: m * raw,
        saving_factor: (m * raw) as f64 / raw as f64,
    })
}

/// Weight generation: global average pool, `C -> C/r` linear, SiLU,
/// `C/r -> slots * K` linear, softmax over `K` within each slot.
/// The last layer starts at zero so every slot begins at the uniform mixture.
#[derive(Clone, Debug)]
pub struct Wgm {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub cin: usize,
    pub k: usize,
    pub slots: usize,
}

impl Wgm {
    pub fn new(b: &mut Builder, name: &str, cin: usize, k: usize, slots: usize, r: usize) -> Result<Self> {
        let hidden = (cin / r.max(1)).max(1);
        Ok(Wgm {
            fc1_w: b.uniform(format!("{name}.fc1.weight"), &[hidden, cin], cin)?,
            fc1_b: b.uniform(format!("{name}.fc1.bias"), &[hidden], cin)?,
            fc2_w: b.zeros(format!("{name}.fc2.weight"), &[slots * k, hidden])?,
            fc2_b: b.zeros(format!("{name}.fc2.bias"), &[slots * k])?,
            cin,
            k,
            slots,
        })
    }

    /// Mixture logits `[N, slots * K]`.
    pub fn logits<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.cin {
            return Err(CoreError::structure(
                "wgm",
                format!("input has {c} channels, expected {}", self.cin),
            ));
        }
        let s = ctx.g.global_avg_pool(x)?;
        let (w1, b1, w2, b2) = (
            ctx.param(self.fc1_w),
            ctx.param(self.fc1_b),
            ctx.param(self.fc2_w),
            ctx.param(self.fc2_b),
        );
        let h = ctx.g.linear(s, w1, Some(b1))?;
        let h = ctx.g.silu(h)?;
        Ok(ctx.g.linear(h, w2, Some(b2))?)
    }

    /// Mixture weights `[N, slots * K]`, a simplex per slot.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let logits = self.logits(ctx, x)?;
        softmax_slots(ctx, logits, self.slots, self.k)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]
    }
}

pub(crate) fn softmax_slots<T: Scalar>(ctx: &mut Ctx<'_, T>, logits: Var, slots: usize, k: usize) -> Result<Var> {
    if slots == 1 {
        return Ok(ctx.g.softmax(logits, 1)?);
    }
    let n = ctx.g.shape(logits)[0];
    let r = ctx.g.reshape(logits, &[n * slots, k])?;
    let a = ctx.g.softmax(r, 1)?;
    Ok(ctx.g.reshape(a, &[n, slots * k])?)
}

/// Warehouse convolution followed by bias, batch norm and SiLU.
#[derive(Clone, Debug)]
pub struct KwConv {
    pub name: String,
    pub wgm: Wgm,
    pub kernels: ParamId,
    pub k: usize,
    pub slots: usize,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    pub bias: ParamId,
    pub bn: BatchNorm,
    pub params: Conv2dParams,
    pub route: KwRoute,
}

impl KwConv {
    pub fn new(
        b: &mut Builder,
        name: &str,
        wh: &mut Warehouse,
        cin: usize,
        cout: usize,
        stride: usize,
        kw: &KwSettings,
    ) -> Result<Self> {
        let [cell_out, cell_in, kh, kw_] = wh.cell;
        if cell_in != cin || kh != kw_ || !cout.is_multiple_of(cell_out) {
            return Err(CoreError::Warehouse {
                warehouse: wh.name.clone(),
                msg: format!("{name}: layer {cin}->{cout} does not fit cells {:?}", wh.cell),
            });
        }
        let slots = cout / cell_out;
        wh.register(b, name)?;
        Ok(KwConv {
            name: name.to_string(),
            wgm: Wgm::new(b, &format!("{name}.wgm"), cin, wh.k, slots, kw.r)?,
            kernels: wh.kernels,
            k: wh.k,
            slots,
            cin,
            cout,
            ksize: kh,
            bias: b.zeros(format!("{name}.bias"), &[cout])?,
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout)?,
            params: Conv2dParams::new(stride, kh / 2),
            route: kw.route,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let alpha = self.wgm.forward(ctx, x)?;
        self.forward_with_alpha(ctx, x, alpha)
    }

    /// Forward with externally supplied mixture weights `[N, slots * K]`.
    pub fn forward_with_alpha<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, alpha: Var) -> Result<Var> {
        let y = self.mixed_conv(ctx, x, alpha)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.g.silu(y)?)
    }

    /// `sum_k alpha_k (W_k * x) + b`, before normalization.
    pub fn mixed_conv<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, alpha: Var) -> Result<Var> {
        let n = ctx.g.shape(x).first().copied().unwrap_or(0);
        let expect = [n, self.slots * self.k];
        if ctx.g.shape(alpha) != expect {
            return Err(CoreError::Warehouse {
                warehouse: self.name.clone(),
                msg: format!(
                    "mixture weights have shape {:?}, expected {:?}",
                    ctx.g.shape(alpha),
                    expect
                ),
            });
        }
        let bank = ctx.param(self.kernels);
        let bias = ctx.param(self.bias);
        match self.route {
            KwRoute::MixKernels => {
                let w = ctx.g.mix_kernels(alpha, bank, self.slots)?;
                Ok(ctx.g.conv2d_per_sample(x, w, Some(bias), self.params)?)
            }
            KwRoute::MixResponses => {
                let cell_out = self.cout / self.slots;
                let flat = ctx
                    .g
                    .reshape(bank, &[self.k * cell_out, self.cin, self.ksize, self.ksize])?;
                let y = ctx.g.conv2d(x, flat, None, self.params)?;
                let y = ctx.g.mix_channel_groups(y, alpha, self.slots)?;
                Ok(ctx.g.channel_bias(y, bias)?)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.wgm.param_ids();
        ids.push(self.kernels);
        ids.push(self.bias);
        ids.extend(self.bn.param_ids());
        ids
    }
}
