//! Central finite-difference gradient checking.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::Result;
use crate::graph::{BatchNormMode, Graph, Var};
use crate::kernels::conv::Conv2dParams;
use crate::kernels::pool::Pool2dParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Denominator floor: errors are `|a - n| / max(|a|, |n|, floor)`, so
    /// gradients smaller than `floor` are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly strided);
    /// `None` checks all of them.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            floor: 1e-6,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Compare the backward pass of `f` against central differences at `inputs`.
/// `f` must return a scalar.
pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_hooked(f, inputs, cfg, |_| {})
}

/// As [`grad_check_with`], with a hook applied to the graph used for the
/// analytic pass (e.g. fault injection).
pub fn grad_check_hooked<F, H>(
    f: F,
    inputs: &[Tensor<f64>],
    cfg: GradCheckConfig,
    hook: H,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    H: FnOnce(&mut Graph<f64>),
{
    let mut g = Graph::new();
    hook(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let n = inputs[i].numel();
        let step = match cfg.max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(step) {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + cfg.eps;
            let plus = eval(&f, &work)?;
            work[i].data_mut()[e] = orig - cfg.eps;
            let minus = eval(&f, &work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((i, e));
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}

/// Single-input convenience wrapper returning the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        eps,
        ..Default::default()
    };
    Ok(grad_check_with(|g, v| f(g, v[0]), std::slice::from_ref(x), cfg)?.max_rel_err)
}

/// `sum(x * r)` for a fixed pseudo-random `r` in `[-1, 1]`; reduces any
/// tensor to a scalar without the symmetry of a plain sum.
pub fn random_projection(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = StdRng::seed_from_u64(seed);
    let r = Tensor::rand_uniform(g.shape(x).to_vec(), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let p = g.mul(x, r)?;
    g.sum(p)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut StdRng::seed_from_u64(seed))
}

fn check(
    fault: Option<&str>,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    grad_check_hooked(
        |g, v| {
            let y = f(g, v)?;
            random_projection(g, y, 99)
        },
        inputs,
        GradCheckConfig::default(),
        |g| {
            if let Some(op) = fault {
                g.inject_sign_flip(op);
            }
        },
    )
}

/// Every differentiable op checked on small random inputs. `fault` names an
/// op whose backward rule is sign-flipped in the analytic pass.
pub fn op_suite(fault: Option<&str>) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let x4 = uniform(&[2, 4, 5, 5], 1);
    let x4b = uniform(&[2, 4, 5, 5], 2);
    let pos = x4.map(|v| v.abs() + 0.5);
    let cases: Vec<(&'static str, Result<GradCheckReport>)> = vec![
        ("conv2d+bias", check(fault, &[x4.clone(), uniform(&[3, 4, 3, 3], 3), uniform(&[3], 4)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), Conv2dParams::new(2, 1))
        })),
        ("conv2d grouped dilated", check(fault, &[x4.clone(), uniform(&[4, 2, 3, 3], 5)], |g, v| {
            g.conv2d(v[0], v[1], None, Conv2dParams::new(1, 2).groups(2).dilation(2))
        })),
        ("conv2d depthwise", check(fault, &[x4.clone(), uniform(&[4, 1, 3, 3], 6)], |g, v| {
            g.conv2d(v[0], v[1], None, Conv2dParams::new(1, 1).groups(4))
        })),
        ("conv2d pointwise", check(fault, &[x4.clone(), uniform(&[6, 4, 1, 1], 7)], |g, v| {
            g.conv2d(v[0], v[1], None, Conv2dParams::default())
        })),
        ("conv2d per sample", check(fault, &[x4.clone(), uniform(&[2, 3, 4, 3, 3], 8), uniform(&[3], 9)], |g, v| {
            g.conv2d_per_sample(v[0], v[1], Some(v[2]), Conv2dParams::new(1, 1))
        })),
        ("max_pool", check(fault, std::slice::from_ref(&x4), |g, v| g.max_pool2d(v[0], Pool2dParams::new(3, 2, 1)))),
        ("avg_pool", check(fault, std::slice::from_ref(&x4), |g, v| g.avg_pool2d(v[0], Pool2dParams::new(2, 1, 1)))),
        ("upsample", check(fault, std::slice::from_ref(&x4), |g, v| g.upsample_nearest(v[0], 2))),
        ("gap", check(fault, std::slice::from_ref(&x4), |g, v| g.global_avg_pool(v[0]))),
        ("concat+slice", check(fault, &[x4.clone(), x4b.clone()], |g, v| {
            let c = g.concat_channels(&[v[0], v[1]])?;
            g.slice_channels(c, 2, 5)
        })),
        ("reshape", check(fault, std::slice::from_ref(&x4), |g, v| g.reshape(v[0], &[8, 25]))),
        ("batch_norm train", check(fault, &[x4.clone(), uniform(&[4], 10), uniform(&[4], 11)], |g, v| {
            let (m, var) = ([0.0; 4], [1.0; 4]);
            let mode = BatchNormMode { running_mean: &m, running_var: &var, eps: 1e-3, train: true, stat_key: None };
            g.batch_norm(v[0], v[1], v[2], mode)
        })),
        ("batch_norm eval", check(fault, &[x4.clone(), uniform(&[4], 12), uniform(&[4], 13)], |g, v| {
            let (m, var) = ([0.1, -0.2, 0.3, 0.0], [0.5, 1.0, 2.0, 1.5]);
            let mode = BatchNormMode { running_mean: &m, running_var: &var, eps: 1e-3, train: false, stat_key: None };
            g.batch_norm(v[0], v[1], v[2], mode)
        })),
        ("group_norm", check(fault, &[x4.clone(), uniform(&[4], 14), uniform(&[4], 15)], |g, v| {
            g.group_norm(v[0], 2, v[1], v[2], 1e-5)
        })),
        ("silu", check(fault, std::slice::from_ref(&x4), |g, v| g.silu(v[0]))),
        ("sigmoid", check(fault, std::slice::from_ref(&x4), |g, v| g.sigmoid(v[0]))),
        ("relu", check(fault, std::slice::from_ref(&x4), |g, v| g.relu(v[0]))),
        ("neg", check(fault, std::slice::from_ref(&x4), |g, v| g.neg(v[0]))),
        ("square", check(fault, std::slice::from_ref(&x4), |g, v| g.square(v[0]))),
        ("sqrt", check(fault, std::slice::from_ref(&pos), |g, v| g.sqrt(v[0]))),
        ("atan", check(fault, std::slice::from_ref(&x4), |g, v| g.atan(v[0]))),
        ("exp", check(fault, std::slice::from_ref(&x4), |g, v| g.exp(v[0]))),
        ("log", check(fault, std::slice::from_ref(&pos), |g, v| g.log(v[0]))),
        ("add_scalar", check(fault, std::slice::from_ref(&x4), |g, v| g.add_scalar(v[0], 0.3))),
        ("mul_scalar", check(fault, std::slice::from_ref(&x4), |g, v| g.mul_scalar(v[0], -1.7))),
        ("add", check(fault, &[x4.clone(), x4b.clone()], |g, v| g.add(v[0], v[1]))),
        ("sub", check(fault, &[x4.clone(), x4b.clone()], |g, v| g.sub(v[0], v[1]))),
        ("mul", check(fault, &[x4.clone(), x4b.clone()], |g, v| g.mul(v[0], v[1]))),
        ("div", check(fault, &[x4.clone(), pos.clone()], |g, v| g.div(v[0], v[1]))),
        ("minimum", check(fault, &[x4.clone(), x4b.clone()], |g, v| g.minimum(v[0], v[1]))),
        ("maximum", check(fault, &[x4.clone(), x4b.clone()], |g, v| g.maximum(v[0], v[1]))),
        ("add_n", check(fault, &[x4.clone(), x4b.clone()], |g, v| g.add_n(&[v[0], v[1], v[0]]))),
        ("scale_by", check(fault, &[x4.clone(), uniform(&[1], 16)], |g, v| g.scale_by(v[0], v[1]))),
        ("channel_bias", check(fault, &[x4.clone(), uniform(&[4], 17)], |g, v| g.channel_bias(v[0], v[1]))),
        ("softmax", check(fault, &[uniform(&[3, 5], 18)], |g, v| g.softmax(v[0], 1))),
        ("log_softmax", check(fault, &[uniform(&[3, 5], 19)], |g, v| g.log_softmax(v[0], 0))),
        ("mean", check(fault, std::slice::from_ref(&x4), |g, v| g.mean(v[0]))),
        ("sum_axis", check(fault, &[uniform(&[3, 5], 20)], |g, v| g.sum_axis(v[0], 1))),
        ("linear", check(fault, &[uniform(&[3, 4], 21), uniform(&[2, 4], 22), uniform(&[2], 23)], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        })),
        ("gather_cells", check(fault, std::slice::from_ref(&x4), |g, v| g.gather_cells(v[0], &[[0, 1, 2], [1, 4, 0], [0, 1, 2]]))),
        ("bce_with_logits", check(fault, &[uniform(&[3, 4], 24)], |g, v| {
            let target = Tensor::from_fn([3, 4], |i| (i % 3) as f64 / 2.0);
            g.bce_with_logits(v[0], target)
        })),
        ("mix_kernels", check(fault, &[uniform(&[2, 6], 25), uniform(&[3, 2, 4, 3, 3], 26)], |g, v| {
            g.mix_kernels(v[0], v[1], 2)
        })),
        ("mix_channel_groups", check(fault, &[uniform(&[2, 6, 3, 3], 27), uniform(&[2, 6], 28)], |g, v| {
            g.mix_channel_groups(v[0], v[1], 2)
        })),
    ];
    cases.into_iter().map(|(n, r)| r.map(|r| (n, r))).collect()
}
