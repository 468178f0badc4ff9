mod common;

use common::{f64_store, run, uniform};
use kfg_core::check::grad_check_params;
use kfg_core::nn::{dfl_expectation, Bottleneck, C2f, ConvBlock, DetectHeadV8, Sppf};
use kfg_core::{Builder, Ctx, CoreError, Mode, ParamStore};
use kfg_tensor::{random_projection, GradCheckConfig, Pool2dParams, Tensor, Var};
use proptest::prelude::*;

fn allocated(b: &Builder) -> usize {
    b.store().learnable_count()
}

#[test]
fn conv_block_counts_match_examples() {
    let mut b = Builder::new(0);
    ConvBlock::new(&mut b, "a", 16, 32, 3, 1).unwrap();
    assert_eq!(allocated(&b), 4672);
    assert_eq!(ConvBlock::analytic_params(16, 32, 3, 1), 16 * 32 * 9 + 64);

    let mut b = Builder::new(0);
    ConvBlock::new(&mut b, "a", 8, 8, 1, 1).unwrap();
    assert_eq!(allocated(&b), 80);

    let mut b = Builder::new(0);
    Bottleneck::new(&mut b, "m", 32, 32, 32, true).unwrap();
    assert_eq!(allocated(&b), 18560);
    assert_eq!(Bottleneck::analytic_params(32, 32, 32), 2 * (32 * 32 * 9 + 64));
}

#[test]
fn running_stats_are_not_counted() {
    let mut b = Builder::new(0);
    let blk = ConvBlock::new(&mut b, "a", 4, 6, 3, 1).unwrap();
    let store = b.finish();
    assert_eq!(store.len(), 5);
    assert_eq!(store.learnable_count(), 4 * 6 * 9 + 12);
    assert_eq!(kfg_core::nn::count_params(&store, &blk.param_ids()), store.learnable_count());
}

#[test]
fn allocated_counts_equal_closed_forms_over_grid() {
    for cin in [8, 16, 24] {
        for cout in [8, 16, 32] {
            for k in [1, 3] {
                for groups in [1, 2, 8] {
                    let mut b = Builder::new(1);
                    ConvBlock::grouped(&mut b, "c", cin, cout, k, 1, groups).unwrap();
                    assert_eq!(allocated(&b), ConvBlock::analytic_params(cin, cout, k, groups), "conv {cin} {cout} {k} {groups}");
                }
            }
            for n in 1..=3 {
                let mut b = Builder::new(1);
                let blk = C2f::new(&mut b, "c2f", cin, cout, n, false).unwrap();
                assert_eq!(allocated(&b), C2f::analytic_params(cin, cout, n), "c2f {cin} {cout} {n}");
                assert_eq!(blk.cv2.conv.cin, (2 + n) * cout / 2);
            }
            let mut b = Builder::new(1);
            let s = Sppf::new(&mut b, "sppf", cin, cout).unwrap();
            assert_eq!(allocated(&b), Sppf::analytic_params(cin, cout));
            assert_eq!(s.cv2.conv.cin, 4 * (cin / 2));
            let mut b = Builder::new(1);
            Bottleneck::new(&mut b, "m", cin, cout, cout / 2, false).unwrap();
            assert_eq!(allocated(&b), Bottleneck::analytic_params(cin, cout, cout / 2));
        }
    }
    for widths in [[16, 32, 64], [64, 128, 256], [8, 8, 16]] {
        for nc in [1, 3, 80] {
            let mut b = Builder::new(1);
            DetectHeadV8::new(&mut b, "h", nc, 16, &widths, 640).unwrap();
            assert_eq!(allocated(&b), DetectHeadV8::analytic_params(nc, 16, &widths));
        }
    }
}

#[test]
fn bottleneck_with_zero_weights_is_identity() {
    let mut b = Builder::new(2);
    let m = Bottleneck::new(&mut b, "m", 4, 4, 4, true).unwrap();
    let mut store: ParamStore<f64> = b.finish().cast();
    // SiLU(BN(0)) with beta 0 is 0, so both convs contribute nothing.
    for id in m.param_ids() {
        if store.name(id).ends_with("conv.weight") {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }
    let x = uniform::<f64>(&[2, 4, 5, 5], 3);
    let y = run(&store, std::slice::from_ref(&x), |ctx, v| vec![m.forward(ctx, v[0]).unwrap()]);
    assert_eq!(y[0], x);
}

#[test]
fn shortcut_requires_equal_widths() {
    let mut b = Builder::new(0);
    let err = Bottleneck::new(&mut b, "m", 4, 8, 4, true).unwrap_err();
    assert!(matches!(err, CoreError::Structure { block: "bottleneck", .. }));
}

#[test]
fn c2f_keeps_shape() {
    let mut b = Builder::new(3);
    let blk = C2f::new(&mut b, "c", 64, 64, 2, true).unwrap();
    assert_eq!(blk.hidden, 32);
    let store = b.finish();
    let x = uniform::<f32>(&[1, 64, 40, 40], 4);
    let y = run(&store, &[x], |ctx, v| vec![blk.forward(ctx, v[0]).unwrap()]);
    assert_eq!(y[0].shape(), &[1, 64, 40, 40]);
}

#[test]
fn sppf_pools_preserve_constants() {
    let mut b = Builder::new(0);
    let s = Sppf::new(&mut b, "s", 4, 4).unwrap();
    assert_eq!(s.pool, Pool2dParams::new(5, 1, 2));
    let store: ParamStore<f64> = b.finish().cast();
    let c = Tensor::full([1, 2, 7, 7], 0.37);
    let outs = run(&store, std::slice::from_ref(&c), |ctx, v| {
        let a = ctx.g.max_pool2d(v[0], s.pool).unwrap();
        let b = ctx.g.max_pool2d(a, s.pool).unwrap();
        let c = ctx.g.max_pool2d(b, s.pool).unwrap();
        vec![a, b, c]
    });
    for o in outs {
        assert_eq!(o, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn c2f_and_sppf_preserve_spatial_size(h in 1usize..10, w in 1usize..10, n in 1usize..3) {
        let mut b = Builder::new(5);
        let c2f = C2f::new(&mut b, "c", 4, 6, n, false).unwrap();
        let sppf = Sppf::new(&mut b, "s", 6, 8).unwrap();
        let store = b.finish();
        let x = uniform::<f32>(&[1, 4, h, w], 6);
        let y = run(&store, &[x], |ctx, v| {
            let a = c2f.forward(ctx, v[0]).unwrap();
            vec![a, sppf.forward(ctx, a).unwrap()]
        });
        prop_assert_eq!(y[0].shape(), &[1, 6, h, w]);
        prop_assert_eq!(y[1].shape(), &[1, 8, h, w]);
    }

    #[test]
    fn dfl_expectation_stays_in_range(logits in prop::collection::vec(-30.0f64..30.0, 16)) {
        let d = dfl_expectation(&logits);
        prop_assert!((0.0..=15.0).contains(&d));
    }
}

#[test]
fn dfl_decode_examples() {
    let mut one_hot = vec![-1e3f64; 16];
    one_hot[3] = 0.0;
    assert_eq!(dfl_expectation(&one_hot), 3.0);
    let uniform = vec![0.25f64; 16];
    assert!((dfl_expectation(&uniform) - 7.5).abs() < 1e-12);
    assert_eq!((0..16).map(|i| i as f64 / 16.0).sum::<f64>(), 7.5);
}

#[test]
fn detect_head_shapes_and_level_check() {
    let mut b = Builder::new(7);
    let head = DetectHeadV8::new(&mut b, "h", 3, 16, &[64, 128, 256], 640).unwrap();
    let store = b.finish();
    let xs = [
        uniform::<f32>(&[1, 64, 80, 80], 1),
        uniform::<f32>(&[1, 128, 40, 40], 2),
        uniform::<f32>(&[1, 256, 20, 20], 3),
    ];
    let outs = run(&store, &xs, |ctx, v| {
        head.forward(ctx, v).unwrap().into_iter().flat_map(|o| [o.reg, o.cls]).collect()
    });
    assert_eq!(outs[0].shape(), &[1, 64, 80, 80]);
    assert_eq!(outs[1].shape(), &[1, 3, 80, 80]);
    assert_eq!(outs[4].shape(), &[1, 64, 20, 20]);
    assert_eq!(outs[5].shape(), &[1, 3, 20, 20]);

    let mut ctx = Ctx::new(&store, Mode::EVAL);
    let x = ctx.g.constant(xs[0].clone());
    let err = head.forward(&mut ctx, &[x, x]).unwrap_err();
    assert!(err.to_string().contains("expected 3 pyramid levels"));
}

fn check_block(store: &ParamStore<f64>, ids: &[kfg_core::ParamId], x: Tensor<f64>, f: impl Fn(&mut Ctx<'_, f64>, Var) -> Var) -> f64 {
    let cfg = GradCheckConfig {
        max_coords: Some(6),
        ..Default::default()
    };
    let r = grad_check_params(
        store,
        ids,
        &[x],
        |ctx, v| {
            let y = f(ctx, v[0]);
            Ok(random_projection(&mut ctx.g, y, 11)?)
        },
        cfg,
        |_| {},
    )
    .unwrap();
    assert!(r.coords_checked > ids.len());
    r.max_rel_err
}

#[test]
fn blocks_pass_gradient_check() {
    let mut b = Builder::new(8);
    let cb = ConvBlock::new(&mut b, "cb", 3, 4, 3, 2).unwrap();
    let bn = Bottleneck::new(&mut b, "bn", 4, 4, 2, true).unwrap();
    let c2f = C2f::new(&mut b, "c2f", 4, 4, 2, true).unwrap();
    let sppf = Sppf::new(&mut b, "sppf", 4, 4).unwrap();
    let head = DetectHeadV8::new(&mut b, "head", 2, 4, &[4, 4, 4], 64).unwrap();
    let store = f64_store(b, 9);
    let x = uniform::<f64>(&[2, 3, 6, 6], 10);
    let x4 = uniform::<f64>(&[1, 4, 4, 4], 12);

    let e = check_block(&store, &cb.param_ids(), x.clone(), |c, v| cb.forward(c, v).unwrap());
    assert!(e <= 1e-4, "conv block {e}");
    let e = check_block(&store, &bn.param_ids(), x4.clone(), |c, v| bn.forward(c, v).unwrap());
    assert!(e <= 1e-4, "bottleneck {e}");
    let e = check_block(&store, &c2f.param_ids(), x4.clone(), |c, v| c2f.forward(c, v).unwrap());
    assert!(e <= 1e-4, "c2f {e}");
    let e = check_block(&store, &sppf.param_ids(), x4.clone(), |c, v| sppf.forward(c, v).unwrap());
    assert!(e <= 1e-4, "sppf {e}");
    let e = check_block(&store, &head.param_ids(), x4, |c, v| {
        let d = c.g.max_pool2d(v, Pool2dParams::new(2, 2, 0)).unwrap();
        let dd = c.g.max_pool2d(d, Pool2dParams::new(2, 2, 0)).unwrap();
        let outs = head.forward(c, &[v, d, dd]).unwrap();
        let flat: Vec<Var> = outs
            .iter()
            .flat_map(|o| [o.reg, o.cls])
            .map(|t| {
                let n = c.g.value(t).numel();
                c.g.reshape(t, &[1, n, 1, 1]).unwrap()
            })
            .collect();
        c.g.concat_channels(&flat).unwrap()
    });
    assert!(e <= 1e-4, "detect head {e}");
}
