mod common;

use common::{f64_store, run, uniform};
use kfg_core::check::{fdpn_reachability, module_suite};
use kfg_core::fdpn::{ADown, Fdpn, FocusFuse, MultiKernelMix};
use kfg_core::{Builder, CoreError, Ctx, Mode, ParamStore};
use kfg_tensor::{Pool2dParams, Tensor};

#[test]
fn adown_halves_resolution() {
    let mut b = Builder::new(1);
    let d = ADown::new(&mut b, "d", 64, 96).unwrap();
    assert_eq!(b.store().learnable_count(), ADown::analytic_params(64, 96));
    let store = b.finish();
    let y = run(&store, &[uniform::<f32>(&[1, 64, 80, 80], 2)], |ctx, v| vec![d.forward(ctx, v[0]).unwrap()]);
    assert_eq!(y[0].shape(), &[1, 96, 40, 40]);
}

#[test]
fn adown_rejects_odd_sizes() {
    let mut b = Builder::new(1);
    let d = ADown::new(&mut b, "d", 4, 4).unwrap();
    let store = b.finish();
    let mut ctx = Ctx::new(&store, Mode::EVAL);
    let x = ctx.g.constant(Tensor::zeros([1, 4, 7, 8]));
    assert!(matches!(d.forward(&mut ctx, x), Err(CoreError::Structure { block: "adown", .. })));
    assert!(ADown::new(&mut Builder::new(0), "odd", 3, 4).is_err());
}

#[test]
fn adown_average_pool_keeps_constants() {
    let c = Tensor::<f64>::full([1, 2, 6, 6], -0.4);
    let store = ParamStore::<f64>::new();
    let y = run(&store, &[c], |ctx, v| vec![ctx.g.avg_pool2d(v[0], Pool2dParams::new(2, 1, 0)).unwrap()]);
    assert_eq!(y[0].shape(), &[1, 2, 5, 5]);
    assert!(y[0].data().iter().all(|&v| v == -0.4));
}

fn levels(seed: u64, widths: [usize; 3], s: usize) -> Vec<Tensor<f64>> {
    vec![
        uniform(&[2, widths[0], s, s], seed),
        uniform(&[2, widths[1], s / 2, s / 2], seed + 1),
        uniform(&[2, widths[2], s / 4, s / 4], seed + 2),
    ]
}

#[test]
fn focus_fuse_shapes_and_stride_check() {
    let mut b = Builder::new(3);
    let f = FocusFuse::new(&mut b, "f", [64, 128, 256], 128).unwrap();
    let store = b.finish();
    let xs = [
        uniform::<f32>(&[1, 64, 80, 80], 1),
        uniform::<f32>(&[1, 128, 40, 40], 2),
        uniform::<f32>(&[1, 256, 20, 20], 3),
    ];
    let y = run(&store, &xs, |ctx, v| vec![f.forward(ctx, v[0], v[1], v[2]).unwrap()]);
    assert_eq!(y[0].shape(), &[1, 128, 40, 40]);

    let mut ctx = Ctx::new(&store, Mode::EVAL);
    let v: Vec<_> = xs.iter().map(|t| ctx.g.constant(t.clone())).collect();
    let err = f.forward(&mut ctx, v[0], v[1], v[1]).unwrap_err();
    assert!(matches!(err, CoreError::Structure { block: "focus fuse", .. }));
}

#[test]
fn zeroed_p5_branch_removes_p5() {
    let mut b = Builder::new(4);
    let f = FocusFuse::new(&mut b, "f", [4, 8, 8], 8).unwrap();
    let mut store = f64_store(b, 5);
    store.value_mut(f.conv5.conv.weight).data_mut().fill(0.0);
    let xs = levels(6, [4, 8, 8], 8);
    let mut other = xs.clone();
    other[2] = uniform(other[2].shape(), 99);
    let a = run(&store, &xs, |ctx, v| vec![f.forward(ctx, v[0], v[1], v[2]).unwrap()]);
    let b = run(&store, &other, |ctx, v| vec![f.forward(ctx, v[0], v[1], v[2]).unwrap()]);
    assert_eq!(a[0], b[0]);
}

fn swap_batch(t: &Tensor<f64>) -> Tensor<f64> {
    let half = t.numel() / 2;
    let mut d = t.data()[half..].to_vec();
    d.extend_from_slice(&t.data()[..half]);
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

#[test]
fn batch_entries_stay_independent() {
    let mut b = Builder::new(7);
    let f = FocusFuse::new(&mut b, "f", [4, 8, 8], 8).unwrap();
    let store = f64_store(b, 8);
    let xs = levels(9, [4, 8, 8], 8);
    let swapped: Vec<_> = xs.iter().map(swap_batch).collect();
    let a = run(&store, &xs, |ctx, v| vec![f.forward(ctx, v[0], v[1], v[2]).unwrap()]);
    let b = run(&store, &swapped, |ctx, v| vec![f.forward(ctx, v[0], v[1], v[2]).unwrap()]);
    assert_eq!(swap_batch(&a[0]), b[0]);
}

#[test]
fn multi_kernel_mix_ablation_identity() {
    let mut b = Builder::new(10);
    let mix = MultiKernelMix::new(&mut b, "mix", 4, &[1, 3, 5, 7]).unwrap();
    let mut store = f64_store(b, 11);
    for br in &mix.branches {
        store.value_mut(br.weight).data_mut().fill(0.0);
        store.value_mut(br.bias.unwrap()).data_mut().fill(0.0);
    }
    let x = uniform::<f64>(&[1, 4, 9, 9], 12);
    let y = run(&store, std::slice::from_ref(&x), |ctx, v| {
        let e = mix.exit.forward(ctx, v[0]).unwrap();
        let expected = ctx.g.add(e, v[0]).unwrap();
        vec![mix.forward(ctx, v[0]).unwrap(), expected]
    });
    assert_eq!(y[0].shape(), &[1, 4, 9, 9]);
    assert!(y[0].max_abs_diff(&y[1]) < 1e-14);
}

#[test]
fn multi_kernel_mix_jacobian_is_identity_when_ablated() {
    // With every branch and the exit conv zeroed the mix reduces to f + const.
    let mut b = Builder::new(13);
    let mix = MultiKernelMix::new(&mut b, "mix", 3, &[1, 3]).unwrap();
    let mut store = f64_store(b, 14);
    for br in &mix.branches {
        store.value_mut(br.weight).data_mut().fill(0.0);
    }
    store.value_mut(mix.exit.conv.weight).data_mut().fill(0.0);
    let x = uniform::<f64>(&[1, 3, 4, 4], 15);
    let mut ctx = Ctx::new(&store, Mode::EVAL_GRAD);
    let xv = ctx.g.variable(x);
    let y = mix.forward(&mut ctx, xv).unwrap();
    let r = Tensor::from_fn([1, 3, 4, 4], |i| (i as f64 * 0.37).sin());
    let rv = ctx.g.constant(r.clone());
    let p = ctx.g.mul(y, rv).unwrap();
    let l = ctx.g.sum(p).unwrap();
    let grad = ctx.g.backward(l).unwrap().get(xv).unwrap();
    assert!(grad.max_abs_diff(&r) < 1e-14);
}

#[test]
fn even_branch_kernels_are_rejected() {
    assert!(MultiKernelMix::new(&mut Builder::new(0), "m", 4, &[1, 4]).is_err());
}

#[test]
fn fdpn_standard_widths() {
    let mut b = Builder::new(16);
    let f = Fdpn::new(&mut b, "fdpn", [64, 128, 256], &[1, 3, 5, 7], 1).unwrap();
    assert_eq!(f.cf, 128);
    let store = b.finish();
    let xs = [
        uniform::<f32>(&[1, 64, 80, 80], 1),
        uniform::<f32>(&[1, 128, 40, 40], 2),
        uniform::<f32>(&[1, 256, 20, 20], 3),
    ];
    let y = run(&store, &xs, |ctx, v| f.forward(ctx, [v[0], v[1], v[2]]).unwrap().to_vec());
    assert_eq!(y[0].shape(), &[1, 64, 80, 80]);
    assert_eq!(y[1].shape(), &[1, 128, 40, 40]);
    assert_eq!(y[2].shape(), &[1, 256, 20, 20]);
}

#[test]
fn fdpn_contract_holds_for_any_multiple_of_32() {
    let mut b = Builder::new(17);
    let f = Fdpn::new(&mut b, "fdpn", [4, 8, 8], &[1, 3], 1).unwrap();
    let store = b.finish();
    for (h, w) in [(32, 32), (64, 32), (96, 160)] {
        let xs = [
            uniform::<f32>(&[1, 4, h / 8, w / 8], 1),
            uniform::<f32>(&[1, 8, h / 16, w / 16], 2),
            uniform::<f32>(&[1, 8, h / 32, w / 32], 3),
        ];
        let y = run(&store, &xs, |ctx, v| f.forward(ctx, [v[0], v[1], v[2]]).unwrap().to_vec());
        for (o, x) in y.iter().zip(&xs) {
            assert_eq!(o.shape(), x.shape());
        }
    }
}

#[test]
fn zero_input_output_is_repeatable() {
    let mut b = Builder::new(18);
    let f = Fdpn::new(&mut b, "fdpn", [4, 8, 8], &[1, 3], 1).unwrap();
    let store = f64_store(b, 19);
    let xs = vec![Tensor::zeros([1, 4, 8, 8]), Tensor::zeros([1, 8, 4, 4]), Tensor::zeros([1, 8, 2, 2])];
    let a = run(&store, &xs, |ctx, v| f.forward(ctx, [v[0], v[1], v[2]]).unwrap().to_vec());
    let b = run(&store, &xs, |ctx, v| f.forward(ctx, [v[0], v[1], v[2]]).unwrap().to_vec());
    assert_eq!(a, b);
}

#[test]
fn every_input_level_reaches_every_output_level() {
    for seed in 0..20 {
        assert_eq!(fdpn_reachability(seed).unwrap(), [[true; 3]; 3], "seed {seed}");
    }
}

#[test]
fn fdpn_blocks_pass_gradient_check() {
    for (name, r) in module_suite("fdpn", 3, None).unwrap() {
        assert!(r.max_rel_err <= 1e-4, "{name}: {} at {:?}", r.max_rel_err, r.worst);
    }
}
