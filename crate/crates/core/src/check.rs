//! Finite-difference checks of parameter gradients through whole blocks,
//! plus the suites behind the `gradcheck` command.

use kfg_tensor::{random_projection, GradCheckConfig, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::fdpn::{ADown, Fdpn, MultiKernelMix};
use crate::gsd::GsdHead;
use crate::kw::{KwConv, KwRoute, KwSettings, Warehouse};
use crate::nn::{C2f, Sppf};
use crate::params::{Builder, Ctx, Mode, ParamId, ParamStore};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamCheckReport {
    pub max_rel_err: f64,
    /// Parameter name (or `input.<i>`) and element of the largest error.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

fn eval<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, Mode::EVAL_GRAD);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.g.variable(t.clone())).collect();
    let out = f(&mut ctx, &vars)?;
    Ok(ctx.g.value(out).data()[0])
}

/// Compare backward-pass gradients of a scalar `f` with central differences
/// for the given parameters and every input. Batch norm runs on running
/// statistics so the function is deterministic per sample.
pub fn grad_check_params<F, H>(
    store: &ParamStore<f64>,
    params: &[ParamId],
    inputs: &[Tensor<f64>],
    f: F,
    cfg: GradCheckConfig,
    hook: H,
) -> Result<ParamCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
    H: FnOnce(&mut Graph<f64>),
{
    let mut ctx = Ctx::new(store, Mode::EVAL_GRAD);
    hook(&mut ctx.g);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.g.variable(t.clone())).collect();
    let out = f(&mut ctx, &vars)?;
    let grads = ctx.g.backward(out)?;

    let mut report = ParamCheckReport::default();
    let stride = |n: usize| match cfg.max_coords {
        Some(m) if m > 0 && n > m => n.div_ceil(m),
        _ => 1,
    };
    let mut record = |name: &dyn Fn() -> String, e: usize, a: f64, numeric: f64| {
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        report.coords_checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((name(), e));
            report.analytic = a;
            report.numeric = numeric;
        }
    };

    let mut work = store.clone();
    for &id in params {
        let analytic = grads
            .keyed(id.0)
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()));
        let n = analytic.numel();
        for e in (0..n).step_by(stride(n)) {
            let orig = store.value(id).data()[e];
            work.value_mut(id).data_mut()[e] = orig + cfg.eps;
            let plus = eval(&work, inputs, &f)?;
            work.value_mut(id).data_mut()[e] = orig - cfg.eps;
            let minus = eval(&work, inputs, &f)?;
            work.value_mut(id).data_mut()[e] = orig;
            record(&|| store.name(id).to_string(), e, analytic.data()[e], (plus - minus) / (2.0 * cfg.eps));
        }
    }

    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let n = analytic.numel();
        for e in (0..n).step_by(stride(n)) {
            let orig = inputs[i].data()[e];
            xs[i].data_mut()[e] = orig + cfg.eps;
            let plus = eval(store, &xs, &f)?;
            xs[i].data_mut()[e] = orig - cfg.eps;
            let minus = eval(store, &xs, &f)?;
            xs[i].data_mut()[e] = orig;
            record(&|| format!("input.{i}"), e, analytic.data()[e], (plus - minus) / (2.0 * cfg.eps));
        }
    }
    Ok(report)
}

/// Modules covered by [`module_suite`].
pub const MODULES: [&str; 4] = ["blocks", "kw", "fdpn", "gsd"];

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Random perturbation of every learnable parameter so zero-initialized
/// layers still pass gradient to everything before them.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.learnable().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

/// Sum of fixed random projections of every output.
fn project(g: &mut Graph<f64>, outs: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(outs.len());
    for (i, &o) in outs.iter().enumerate() {
        terms.push(random_projection(g, o, 1000 + i as u64)?);
    }
    Ok(g.add_n(&terms)?)
}

type BlockFn<'a> = Box<dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Vec<Var>> + 'a>;

struct Case<'a> {
    name: &'static str,
    ids: Vec<ParamId>,
    inputs: Vec<Tensor<f64>>,
    f: BlockFn<'a>,
}

/// Gradient checks of whole blocks in 64-bit precision, with randomized
/// parameters. `fault` sign-flips one op's backward rule.
pub fn module_suite(module: &str, seed: u64, fault: Option<&str>) -> Result<Vec<(String, ParamCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(seed);
    let mut cases: Vec<Case<'_>> = Vec::new();
    let x = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(s, rng);
    match module {
        "blocks" => {
            let c2f = C2f::new(&mut b, "c2f", 4, 4, 2, true)?;
            let sppf = Sppf::new(&mut b, "sppf", 4, 4)?;
            cases.push(Case {
                name: "c2f",
                ids: c2f.param_ids(),
                inputs: vec![x(&mut rng, &[2, 4, 4, 4])],
                f: Box::new(move |c, v| Ok(vec![c2f.forward(c, v[0])?])),
            });
            cases.push(Case {
                name: "sppf",
                ids: sppf.param_ids(),
                inputs: vec![x(&mut rng, &[1, 4, 6, 6])],
                f: Box::new(move |c, v| Ok(vec![sppf.forward(c, v[0])?])),
            });
        }
        "kw" => {
            for (name, route) in [("kwconv", KwRoute::MixKernels), ("kwconv-mix-responses", KwRoute::MixResponses)] {
                let kw = KwSettings {
                    k: 4,
                    r: 2,
                    route,
                    share: true,
                };
                let mut wh = Warehouse::for_members(&mut b, &format!("{name}.warehouse"), 4, 2, 4, 4, 3)?;
                let a = KwConv::new(&mut b, &format!("{name}.a"), &mut wh, 4, 4, 2, &kw)?;
                let c = KwConv::new(&mut b, &format!("{name}.b"), &mut wh, 4, 4, 1, &kw)?;
                let mut ids = a.param_ids();
                ids.extend(c.param_ids());
                cases.push(Case {
                    name,
                    ids,
                    inputs: vec![x(&mut rng, &[2, 4, 6, 6])],
                    f: Box::new(move |ctx, v| {
                        let y = a.forward(ctx, v[0])?;
                        Ok(vec![c.forward(ctx, y)?])
                    }),
                });
            }
            let c2f = C2f::kw(&mut b, "c2f_kw", 8, 8, 2, true, &KwSettings { r: 2, ..KwSettings::default() })?;
            cases.push(Case {
                name: "c2f-kw",
                ids: c2f.param_ids(),
                inputs: vec![x(&mut rng, &[2, 8, 4, 4])],
                f: Box::new(move |c, v| Ok(vec![c2f.forward(c, v[0])?])),
            });
        }
        "fdpn" => {
            let widths = [4, 8, 8];
            let adown = ADown::new(&mut b, "adown", 4, 6)?;
            let mix = MultiKernelMix::new(&mut b, "mix", 4, &[1, 3, 5])?;
            let fdpn = Fdpn::new(&mut b, "fdpn", widths, &[1, 3], 1)?;
            let levels = vec![x(&mut rng, &[1, 4, 8, 8]), x(&mut rng, &[1, 8, 4, 4]), x(&mut rng, &[1, 8, 2, 2])];
            cases.push(Case {
                name: "adown",
                ids: adown.param_ids(),
                inputs: vec![x(&mut rng, &[2, 4, 6, 6])],
                f: Box::new(move |c, v| Ok(vec![adown.forward(c, v[0])?])),
            });
            cases.push(Case {
                name: "multi-kernel-mix",
                ids: mix.param_ids(),
                inputs: vec![x(&mut rng, &[1, 4, 5, 5])],
                f: Box::new(move |c, v| Ok(vec![mix.forward(c, v[0])?])),
            });
            cases.push(Case {
                name: "fdpn",
                ids: fdpn.param_ids(),
                inputs: levels,
                f: Box::new(move |c, v| Ok(fdpn.forward(c, [v[0], v[1], v[2]])?.to_vec())),
            });
        }
        "gsd" => {
            let head = GsdHead::new(&mut b, "gsd", 2, 4, &[4, 8, 8], 4, 64)?;
            cases.push(Case {
                name: "gsd-head",
                ids: head.param_ids(),
                inputs: vec![x(&mut rng, &[1, 4, 8, 8]), x(&mut rng, &[1, 8, 4, 4]), x(&mut rng, &[1, 8, 2, 2])],
                f: Box::new(move |c, v| {
                    Ok(head.forward(c, v)?.into_iter().flat_map(|o| [o.reg, o.cls]).collect())
                }),
            });
        }
        other => {
            return Err(CoreError::Config(format!(
                "unknown gradcheck module {other:?} (expected one of {MODULES:?})"
            )))
        }
    }

    let mut store = b.finish().cast::<f64>();
    jitter(&mut store, &mut rng);
    let cfg = GradCheckConfig {
        max_coords: Some(8),
        ..GradCheckConfig::default()
    };
    let mut out = Vec::with_capacity(cases.len());
    for case in &cases {
        let report = grad_check_params(
            &store,
            &case.ids,
            &case.inputs,
            |ctx, v| {
                let ys = (case.f)(ctx, v)?;
                project(&mut ctx.g, &ys)
            },
            cfg,
            |g| {
                if let Some(op) = fault {
                    g.inject_sign_flip(op);
                }
            },
        )?;
        out.push((case.name.to_string(), report));
    }
    Ok(out)
}

/// Largest relative deviations of the two degenerate identities over
/// `instances` random draws: a one-kernel warehouse against a plain
/// convolution with bias, and kernel mixing against response mixing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KwEquivalence {
    pub single_kernel: f64,
    pub routes: f64,
    pub instances: usize,
}

pub fn kw_equivalence(instances: usize, seed: u64) -> Result<KwEquivalence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = KwEquivalence {
        single_kernel: 0.0,
        routes: 0.0,
        instances,
    };
    for i in 0..instances {
        let s = seed.wrapping_mul(1000).wrapping_add(i as u64);
        let cin = rng.random_range(1..=6);
        let cout = 2 * rng.random_range(1..=3);
        let ksize = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..=2);
        let n = rng.random_range(1..=2);
        let hw = rng.random_range(ksize.max(2)..=7);
        let x = uniform(&[n, cin, hw, hw], &mut rng);

        // K = 1 against conv2d(x, W, b).
        let mut b = Builder::new(s);
        let mut wh = Warehouse::new(&mut b, "wh", 1, [cout, cin, ksize, ksize], cout)?;
        let layer = KwConv::new(&mut b, "kw", &mut wh, cin, cout, stride, &KwSettings { k: 1, ..KwSettings::default() })?;
        let mut store = b.finish().cast::<f64>();
        jitter(&mut store, &mut rng);
        let mut ctx = Ctx::new(&store, Mode::EVAL);
        let xv = ctx.g.constant(x.clone());
        let y_kw = layer.forward(&mut ctx, xv)?;
        let w = ctx.param(layer.kernels);
        let w = ctx.g.reshape(w, &[cout, cin, ksize, ksize])?;
        let bias = ctx.param(layer.bias);
        let y = ctx.g.conv2d(xv, w, Some(bias), layer.params)?;
        let y = layer.bn.forward(&mut ctx, y)?;
        let y_ref = ctx.g.silu(y)?;
        report.single_kernel = report
            .single_kernel
            .max(ctx.g.value(y_kw).max_rel_diff(ctx.g.value(y_ref), 1e-9));

        // Mix-then-convolve against convolve-then-mix, several slots.
        let k = rng.random_range(2..=4);
        let members = [1, 2][rng.random_range(0..2)];
        let mut outs = Vec::new();
        for route in [KwRoute::MixKernels, KwRoute::MixResponses] {
            let kw = KwSettings {
                k,
                r: 2,
                route,
                share: true,
            };
            let mut b = Builder::new(s);
            let mut wh = Warehouse::for_members(&mut b, "wh", k, members, cout, cin, ksize)?;
            let layer = KwConv::new(&mut b, "kw", &mut wh, cin, cout, stride, &kw)?;
            let mut store = b.finish().cast::<f64>();
            jitter(&mut store, &mut ChaCha8Rng::seed_from_u64(s));
            let mut ctx = Ctx::new(&store, Mode::EVAL);
            let xv = ctx.g.constant(x.clone());
            let y = layer.forward(&mut ctx, xv)?;
            outs.push(ctx.g.value(y).clone());
        }
        report.routes = report.routes.max(outs[0].max_rel_diff(&outs[1], 1e-9));
    }
    Ok(report)
}

fn forward_levels<F>(store: &ParamStore<f64>, xs: &[Tensor<f64>], f: F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Vec<Var>>,
{
    let mut ctx = Ctx::new(store, Mode::EVAL);
    let vars: Vec<Var> = xs.iter().map(|t| ctx.g.constant(t.clone())).collect();
    let outs = f(&mut ctx, &vars)?;
    Ok(outs.iter().map(|&v| ctx.g.value(v).clone()).collect())
}

/// `moved[i][j]`: poking one location of input level `i` changes output level
/// `j` of a randomly initialized FDPN.
pub fn fdpn_reachability(seed: u64) -> Result<[[bool; 3]; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(seed);
    let widths = [8, 16, 32];
    let fdpn = Fdpn::new(&mut b, "fdpn", widths, &[1, 3, 5, 7], 1)?;
    let mut store = b.finish().cast::<f64>();
    jitter(&mut store, &mut rng);
    let xs: Vec<Tensor<f64>> = (0..3).map(|l| uniform(&[1, widths[l], 16 >> l, 16 >> l], &mut rng)).collect();
    let f = |ctx: &mut Ctx<'_, f64>, v: &[Var]| Ok(fdpn.forward(ctx, [v[0], v[1], v[2]])?.to_vec());
    let base = forward_levels(&store, &xs, f)?;
    let mut moved = [[false; 3]; 3];
    for (level, row) in moved.iter_mut().enumerate() {
        let mut poked = xs.clone();
        let h = poked[level].shape()[2];
        // Every channel at one location, by more than the input range, so
        // the bump also wins any max-pool window it lands in.
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..h));
        for c in 0..widths[level] {
            let v = poked[level].at(&[0, c, y, x]);
            poked[level].set(&[0, c, y, x], v + 2.0);
        }
        let out = forward_levels(&store, &poked, f)?;
        for (j, hit) in row.iter_mut().enumerate() {
            *hit = base[j].max_abs_diff(&out[j]) > 0.0;
        }
    }
    Ok(moved)
}

/// Perturb one element of the shared head stem once and report, per level,
/// whether the head output changed.
pub fn stem_identity(seed: u64) -> Result<[bool; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(seed);
    let widths = [8, 16, 32];
    let head = GsdHead::new(&mut b, "gsd", 3, 4, &widths, 8, 64)?;
    let mut store = b.finish().cast::<f64>();
    jitter(&mut store, &mut rng);
    let xs: Vec<Tensor<f64>> = (0..3).map(|l| uniform(&[1, widths[l], 8 >> l, 8 >> l], &mut rng)).collect();
    let f = |ctx: &mut Ctx<'_, f64>, v: &[Var]| {
        Ok(head.forward(ctx, v)?.into_iter().flat_map(|o| [o.reg, o.cls]).collect())
    };
    let base = forward_levels(&store, &xs, f)?;
    let w = head.stem[0].conv.weight;
    let n = store.value(w).numel();
    store.value_mut(w).data_mut()[rng.random_range(0..n)] += 0.25;
    let out = forward_levels(&store, &xs, f)?;
    Ok([0, 1, 2].map(|l| base[2 * l].max_abs_diff(&out[2 * l]) > 0.0 && base[2 * l + 1].max_abs_diff(&out[2 * l + 1]) > 0.0))
}
