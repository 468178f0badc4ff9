//! Whole-network assembly, forward passes and parameter audits.

use std::collections::BTreeMap;

use kfg_tensor::{Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::fdpn::Fdpn;
use crate::gsd::GsdHead;
use crate::kw::{KwConv, KwSettings, Warehouse};
use crate::nn::{C2f, ConvBlock, ConvUnit, DetectHeadV8, LevelOut, Sppf};
use crate::params::{Builder, Ctx, Mode, ParamId, ParamKind, ParamStore};

/// YOLOv8 backbone; layer indices follow the reference layout
/// (0..=9, P3 after layer 4, P4 after 6, P5 after 9).
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: [ConvBlock; 2],
    pub c2f1: C2f,
    /// Layers 3, 5, 7.
    pub downs: [ConvUnit; 3],
    /// Layers 4, 6, 8.
    pub stages: [C2f; 3],
    pub sppf: Sppf,
    /// Single-member warehouses of the KW downsamplers.
    pub warehouses: Vec<Warehouse>,
}

impl Backbone {
    pub fn new(b: &mut Builder, cfg: &ModelConfig, kw: &KwSettings) -> Result<Self> {
        let w = cfg.widths();
        let d = cfg.depths();
        let name = |i: usize| format!("backbone.{i:02}");
        let stem = [
            ConvBlock::new(b, &name(0), 3, w[0], 3, 2)?,
            ConvBlock::new(b, &name(1), w[0], w[1], 3, 2)?,
        ];
        let c2f1 = C2f::new(b, &name(2), w[1], w[1], d[0], true)?;
        let mut downs = Vec::with_capacity(3);
        let mut stages = Vec::with_capacity(3);
        let mut warehouses = Vec::new();
        for s in 0..3 {
            let (cin, cout) = (w[s + 1], w[s + 2]);
            let li = 3 + 2 * s;
            if cfg.kwconv {
                let mut wh = Warehouse::for_members(b, &format!("{}.warehouse", name(li)), kw.k, 1, cout, cin, 3)?;
                downs.push(ConvUnit::Kw(KwConv::new(b, &name(li), &mut wh, cin, cout, 2, kw)?));
                warehouses.push(wh);
            } else {
                downs.push(ConvUnit::Plain(ConvBlock::new(b, &name(li), cin, cout, 3, 2)?));
            }
            let n = d[s + 1];
            stages.push(if cfg.c2f_kw {
                C2f::kw(b, &name(li + 1), cout, cout, n, true, kw)?
            } else {
                C2f::new(b, &name(li + 1), cout, cout, n, true)?
            });
        }
        let sppf = Sppf::new(b, &name(9), w[4], w[4])?;
        Ok(Backbone {
            stem,
            c2f1,
            downs: downs.try_into().expect("three downsamplers"),
            stages: stages.try_into().expect("three stages"),
            sppf,
            warehouses,
        })
    }

    /// P3, P4, P5.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<[Var; 3]> {
        let x = self.stem[0].forward(ctx, x)?;
        let x = self.stem[1].forward(ctx, x)?;
        let mut x = self.c2f1.forward(ctx, x)?;
        let mut taps = Vec::with_capacity(3);
        for (down, stage) in self.downs.iter().zip(&self.stages) {
            x = down.forward(ctx, x)?;
            x = stage.forward(ctx, x)?;
            taps.push(x);
        }
        let p5 = self.sppf.forward(ctx, taps[2])?;
        Ok([taps[0], taps[1], p5])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.stem.iter().flat_map(ConvBlock::param_ids).collect();
        ids.extend(self.c2f1.param_ids());
        for (d, s) in self.downs.iter().zip(&self.stages) {
            ids.extend(d.param_ids());
            ids.extend(s.param_ids());
        }
        ids.extend(self.sppf.param_ids());
        ids
    }

    pub fn all_warehouses(&self) -> Vec<&Warehouse> {
        self.warehouses
            .iter()
            .chain(self.stages.iter().flat_map(|s| &s.warehouses))
            .collect()
    }
}

/// YOLOv8 FPN + PAN neck (layers 10..=21).
#[derive(Clone, Debug)]
pub struct PanNeck {
    pub top4: C2f,
    pub top3: C2f,
    pub down3: ConvBlock,
    pub bottom4: C2f,
    pub down4: ConvBlock,
    pub bottom5: C2f,
}

impl PanNeck {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let [c3, c4, c5] = cfg.level_widths();
        let n = cfg.neck_depth();
        let name = |i: usize| format!("neck.{i:02}");
        Ok(PanNeck {
            top4: C2f::new(b, &name(12), c5 + c4, c4, n, false)?,
            top3: C2f::new(b, &name(15), c4 + c3, c3, n, false)?,
            down3: ConvBlock::new(b, &name(16), c3, c3, 3, 2)?,
            bottom4: C2f::new(b, &name(18), c3 + c4, c4, n, false)?,
            down4: ConvBlock::new(b, &name(19), c4, c4, 3, 2)?,
            bottom5: C2f::new(b, &name(21), c4 + c5, c5, n, false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, levels: [Var; 3]) -> Result<[Var; 3]> {
        let [p3, p4, p5] = levels;
        let u = ctx.g.upsample_nearest(p5, 2)?;
        let cat = ctx.g.concat_channels(&[u, p4])?;
        let t4 = self.top4.forward(ctx, cat)?;
        let u = ctx.g.upsample_nearest(t4, 2)?;
        let cat = ctx.g.concat_channels(&[u, p3])?;
        let n3 = self.top3.forward(ctx, cat)?;
        let d = self.down3.forward(ctx, n3)?;
        let cat = ctx.g.concat_channels(&[d, t4])?;
        let n4 = self.bottom4.forward(ctx, cat)?;
        let d = self.down4.forward(ctx, n4)?;
        let cat = ctx.g.concat_channels(&[d, p5])?;
        let n5 = self.bottom5.forward(ctx, cat)?;
        Ok([n3, n4, n5])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.top4.param_ids();
        ids.extend(self.top3.param_ids());
        ids.extend(self.down3.param_ids());
        ids.extend(self.bottom4.param_ids());
        ids.extend(self.down4.param_ids());
        ids.extend(self.bottom5.param_ids());
        ids
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Neck {
    Pan(PanNeck),
    Fdpn(Fdpn),
}

impl Neck {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, levels: [Var; 3]) -> Result<[Var; 3]> {
        match self {
            Neck::Pan(n) => n.forward(ctx, levels),
            Neck::Fdpn(n) => n.forward(ctx, levels),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Neck::Pan(n) => n.param_ids(),
            Neck::Fdpn(n) => n.param_ids(),
        }
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Head {
    V8(DetectHeadV8),
    Gsd(GsdHead),
}

impl Head {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, levels: &[Var]) -> Result<Vec<LevelOut>> {
        match self {
            Head::V8(h) => h.forward(ctx, levels),
            Head::Gsd(h) => h.forward(ctx, levels),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Head::V8(h) => h.param_ids(),
            Head::Gsd(h) => h.param_ids(),
        }
    }
}

/// Layer structure; parameters live in the [`ParamStore`] next to it.
#[derive(Clone, Debug)]
pub struct Network {
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

impl Network {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Vec<LevelOut>> {
        let levels = self.backbone.forward(ctx, images)?;
        let levels = self.neck.forward(ctx, levels)?;
        self.head.forward(ctx, &levels)
    }
}

/// Head maps of one level as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelMaps<T> {
    pub reg: Tensor<T>,
    pub cls: Tensor<T>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub net: Network,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn kw_settings(cfg: &ModelConfig) -> KwSettings {
        KwSettings {
            k: cfg.k,
            r: cfg.r,
            ..KwSettings::default()
        }
    }

    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(seed);
        let kw = Self::kw_settings(cfg);
        let backbone = Backbone::new(&mut b, cfg, &kw)?;
        let levels = cfg.level_widths();
        let neck = if cfg.fdpn {
            Neck::Fdpn(Fdpn::new(&mut b, "neck.fdpn", levels, &cfg.dw_kernels, cfg.neck_depth())?)
        } else {
            Neck::Pan(PanNeck::new(&mut b, cfg)?)
        };
        let head = if cfg.gsdhead {
            Head::Gsd(GsdHead::new(
                &mut b,
                "head.gsd",
                cfg.nc,
                cfg.reg_max,
                &levels,
                cfg.shared_width(),
                cfg.imgsz,
            )?)
        } else {
            Head::V8(DetectHeadV8::new(&mut b, "head.detect", cfg.nc, cfg.reg_max, &levels, cfg.imgsz)?)
        };
        Ok(Model {
            cfg: cfg.clone(),
            net: Network { backbone, neck, head },
            store: b.finish(),
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, 3, h, w] if h > 0 && h % 32 == 0 && w > 0 && w % 32 == 0 => Ok(()),
            _ => Err(CoreError::structure(
                "model",
                format!("input must be [N, 3, H, W] with H, W multiples of 32, got {shape:?}"),
            )),
        }
    }

    /// Forward pass on a caller-provided context (any precision).
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Vec<LevelOut>> {
        self.check_input(ctx.g.shape(images))?;
        self.net.forward(ctx, images)
    }

    /// Inference with running statistics.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<LevelMaps<f32>>> {
        self.check_input(images.shape())?;
        let mut ctx = Ctx::new(&self.store, Mode::EVAL);
        let x = ctx.g.constant(images.clone());
        let outs = self.net.forward(&mut ctx, x)?;
        Ok(outs
            .iter()
            .map(|o| LevelMaps {
                reg: ctx.g.value(o.reg).clone(),
                cls: ctx.g.value(o.cls).clone(),
                stride: o.stride,
            })
            .collect())
    }

    pub fn warehouses(&self) -> Vec<&Warehouse> {
        let mut all = self.net.backbone.all_warehouses();
        if let Neck::Fdpn(f) = &self.net.neck {
            for c in [&f.diffuse.fuse3, &f.diffuse.fuse4, &f.diffuse.fuse5] {
                all.extend(&c.warehouses);
            }
        }
        all
    }

    pub fn audit(&self) -> ParamAudit {
        ParamAudit::of(&self.store)
    }

    /// Parameter ids reached by the layer structure, for cross-checking the
    /// registry.
    pub fn structural_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.net.backbone.param_ids();
        ids.extend(self.net.neck.param_ids());
        ids.extend(self.net.head.param_ids());
        crate::nn::dedup(ids)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    /// Id of the storage when it is shared by several layers.
    pub shared_group: Option<usize>,
    /// Number of layers referencing the storage (1 when not shared).
    pub references: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamAudit {
    /// One row per learnable storage, sorted by name.
    pub rows: Vec<AuditRow>,
    /// Every storage counted once.
    pub dedup_total: usize,
    /// Shared storage counted once per referencing layer.
    pub raw_total: usize,
}

impl ParamAudit {
    pub fn of<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut refs: BTreeMap<usize, usize> = BTreeMap::new();
        for a in store.aliases() {
            *refs.entry(a.target.0).or_default() += 1;
        }
        let mut rows: Vec<AuditRow> = store
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Learnable)
            .map(|(i, e)| {
                let references = refs.get(&i).copied().unwrap_or(1);
                AuditRow {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    count: e.value.numel(),
                    shared_group: e.shared.then_some(i),
                    references,
                }
            })
            .collect();
        rows.sort_by(|a, b| a.name.cmp(&b.name));
        let dedup_total = rows.iter().map(|r| r.count).sum();
        let raw_total = rows.iter().map(|r| r.count * r.references).sum();
        ParamAudit {
            rows,
            dedup_total,
            raw_total,
        }
    }

    /// Totals grouped by the first `depth` dot-separated name components.
    pub fn module_totals(&self, depth: usize) -> Vec<(String, usize)> {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for r in &self.rows {
            let key: Vec<&str> = r.name.split('.').take(depth).collect();
            *m.entry(key.join(".")).or_default() += r.count;
        }
        m.into_iter().collect()
    }

    pub fn millions(&self) -> f64 {
        self.dedup_total as f64 / 1e6
    }
}
