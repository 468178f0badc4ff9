mod common;

use common::{f64_store, run, uniform};
use kfg_core::check::{module_suite, stem_identity};
use kfg_core::gsd::{clamp_groups, head_param_compare, GnConv, GsdHead, GN_GROUPS};
use kfg_core::nn::DetectHeadV8;
use kfg_core::{Builder, Ctx, Mode, ParamStore};
use kfg_tensor::{random_projection, Tensor, Var};

#[test]
fn group_count_divides_width() {
    assert_eq!(GN_GROUPS, 16);
    for (c, g) in [(64, 16), (32, 16), (24, 12), (8, 8), (7, 7), (17, 1), (48, 16), (20, 10)] {
        assert_eq!(clamp_groups(c, GN_GROUPS), g, "c={c}");
    }
}

#[test]
fn gn_conv_count() {
    let mut b = Builder::new(0);
    GnConv::new(&mut b, "g", 16, 32, 3).unwrap();
    assert_eq!(b.store().learnable_count(), GnConv::analytic_params(16, 32, 3));
    assert_eq!(GnConv::analytic_params(16, 32, 3), 16 * 32 * 9 + 64);
    // Group norm has no running statistics.
    assert_eq!(b.store().len(), 3);
}

#[test]
fn head_shapes_at_n_scale() {
    let mut b = Builder::new(1);
    let head = GsdHead::new(&mut b, "h", 3, 16, &[64, 128, 256], 64, 640).unwrap();
    let store = b.finish();
    let xs = [
        uniform::<f32>(&[1, 64, 80, 80], 1),
        uniform::<f32>(&[1, 128, 40, 40], 2),
        uniform::<f32>(&[1, 256, 20, 20], 3),
    ];
    let outs = run(&store, &xs, |ctx, v| head.forward(ctx, v).unwrap().into_iter().flat_map(|o| [o.reg, o.cls]).collect());
    assert_eq!(outs[0].shape(), &[1, 64, 80, 80]);
    assert_eq!(outs[1].shape(), &[1, 3, 80, 80]);
    assert_eq!(outs[2].shape(), &[1, 64, 40, 40]);
    assert_eq!(outs[5].shape(), &[1, 3, 20, 20]);

    let mut ctx = Ctx::new(&store, Mode::EVAL);
    let x = ctx.g.constant(xs[0].clone());
    assert!(head.forward(&mut ctx, &[x]).is_err());
}

fn small_head(seed: u64) -> (GsdHead, ParamStore<f64>, Vec<Tensor<f64>>) {
    let mut b = Builder::new(seed);
    let head = GsdHead::new(&mut b, "h", 2, 4, &[4, 8, 8], 4, 64).unwrap();
    let store = f64_store(b, seed + 1);
    let xs = vec![uniform(&[2, 4, 8, 8], seed + 2), uniform(&[2, 8, 4, 4], seed + 3), uniform(&[2, 8, 2, 2], seed + 4)];
    (head, store, xs)
}

#[test]
fn unit_scale_leaves_boxes_unchanged() {
    let mut b = Builder::new(2);
    let head = GsdHead::new(&mut b, "h", 2, 4, &[4, 8, 8], 4, 64).unwrap();
    let store: ParamStore<f64> = b.finish().cast();
    for &s in &head.scales {
        assert_eq!(store.value(s).data(), &[1.0]);
    }
    let xs = vec![uniform(&[1, 4, 4, 4], 1), uniform(&[1, 8, 2, 2], 2), uniform(&[1, 8, 1, 1], 3)];
    let outs = run(&store, &xs, |ctx, v| {
        let a = head.forward(ctx, v).unwrap();
        let b = head.forward_unscaled(ctx, v).unwrap();
        a.iter().zip(&b).flat_map(|(x, y)| [x.reg, y.reg, x.cls, y.cls]).collect()
    });
    for pair in outs.chunks(2) {
        assert_eq!(pair[0], pair[1]);
    }
}

#[test]
fn stem_is_one_storage() {
    let (head, store, _) = small_head(3);
    let names: Vec<&str> = head.stem_ids().iter().map(|&id| store.name(id)).collect();
    assert!(names.iter().all(|n| n.starts_with("h.stem.")));
    assert!(store.entries().iter().all(|e| !e.name.contains("stem") || e.name.starts_with("h.stem.")));
    // Stem size does not depend on the number of levels.
    let stem: usize = head.stem_ids().iter().map(|&id| store.value(id).numel()).sum();
    assert_eq!(stem, 2 * GnConv::analytic_params(4, 4, 3));
}

#[test]
fn perturbing_the_stem_moves_every_level() {
    for seed in 0..10 {
        assert_eq!(stem_identity(seed).unwrap(), [true; 3], "seed {seed}");
    }
}

/// Gradient of one stem weight for a loss built from the selected levels.
fn stem_grad(head: &GsdHead, store: &ParamStore<f64>, xs: &[Tensor<f64>], levels: &[usize]) -> Tensor<f64> {
    let mut ctx = Ctx::new(store, Mode::EVAL_GRAD);
    let vars: Vec<Var> = xs.iter().map(|t| ctx.g.constant(t.clone())).collect();
    let outs = head.forward(&mut ctx, &vars).unwrap();
    let mut terms = Vec::new();
    for &l in levels {
        terms.push(random_projection(&mut ctx.g, outs[l].reg, 10 + l as u64).unwrap());
        terms.push(random_projection(&mut ctx.g, outs[l].cls, 20 + l as u64).unwrap());
    }
    let loss = ctx.g.add_n(&terms).unwrap();
    ctx.g.backward(loss).unwrap().keyed(head.stem[1].conv.weight.0).unwrap()
}

#[test]
fn stem_gradient_is_sum_of_level_contributions() {
    let (head, store, xs) = small_head(4);
    let all = stem_grad(&head, &store, &xs, &[0, 1, 2]);
    let parts: Vec<Tensor<f64>> = (0..3).map(|l| stem_grad(&head, &store, &xs, &[l])).collect();
    let sum = Tensor::from_fn(all.shape().to_vec(), |i| parts.iter().map(|p| p.data()[i]).sum());
    assert!(parts.iter().all(|p| p.data().iter().any(|&v| v != 0.0)));
    assert!(all.max_abs_diff(&sum) < 1e-12);
}

#[test]
fn scale_gradient_is_projection_of_unscaled_boxes() {
    let (head, store, xs) = small_head(5);
    let mut ctx = Ctx::new(&store, Mode::EVAL_GRAD);
    let vars: Vec<Var> = xs.iter().map(|t| ctx.g.constant(t.clone())).collect();
    let outs = head.forward(&mut ctx, &vars).unwrap();
    let raw = head.forward_unscaled(&mut ctx, &vars).unwrap();
    let upstream = Tensor::from_fn(ctx.g.shape(outs[1].reg).to_vec(), |i| (i as f64 * 0.13).cos());
    let u = ctx.g.constant(upstream.clone());
    let p = ctx.g.mul(outs[1].reg, u).unwrap();
    let loss = ctx.g.sum(p).unwrap();
    let expected: f64 = ctx.g.value(raw[1].reg).data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum();
    let grads = ctx.g.backward(loss).unwrap();
    let got = grads.keyed(head.scales[1].0).unwrap().data()[0];
    assert!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    assert!(grads.keyed(head.scales[0].0).is_none_or(|g| g.data()[0] == 0.0));
}

#[test]
fn shared_head_is_smaller_than_decoupled() {
    for widths in [[16, 32, 64], [64, 128, 256], [8, 8, 16], [32, 64, 64]] {
        for nc in [1, 3, 20] {
            let cs = *widths.iter().min().unwrap();
            let mut b = Builder::new(0);
            let v8 = DetectHeadV8::new(&mut b, "v8", nc, 16, &widths, 640).unwrap();
            let gsd = GsdHead::new(&mut b, "gsd", nc, 16, &widths, cs, 640).unwrap();
            let cmp = head_param_compare(&v8, &gsd, b.store());
            assert!(cmp.shared < cmp.decoupled, "{widths:?} nc={nc}");
            assert!(cmp.reduction > 0.0 && cmp.reduction < 1.0);
        }
    }
}

#[test]
fn n_scale_head_counts_match_closed_form() {
    let widths = [64, 128, 256];
    let mut b = Builder::new(0);
    let head = GsdHead::new(&mut b, "gsd", 3, 16, &widths, 64, 640).unwrap();
    let allocated = b.store().learnable_count();
    assert_eq!(allocated, GsdHead::analytic_params(3, 16, &widths, 64));
    // align 1x1 GN blocks + shared stem + reg/cls projections + scales.
    let by_hand = (64 * 64 + 128) + (128 * 64 + 128) + (256 * 64 + 128)
        + 2 * (64 * 64 * 9 + 128)
        + 3 * (64 * 64 + 64 + 64 * 3 + 3 + 1);
    assert_eq!(allocated, by_hand);
    assert_eq!(kfg_core::nn::count_params(b.store(), &head.param_ids()), allocated);

    let mut b = Builder::new(0);
    let v8 = DetectHeadV8::new(&mut b, "v8", 3, 16, &widths, 640).unwrap();
    let v8_total = b.store().learnable_count();
    assert_eq!(v8_total, DetectHeadV8::analytic_params(3, 16, &widths));
    // Branch widths are 64 and 64; two 3x3 blocks plus a 1x1 per branch and level.
    let branch = |ch: usize, out: usize| (ch * 64 * 9 + 128) + (64 * 64 * 9 + 128) + 64 * out + out;
    let by_hand: usize = widths.iter().map(|&c| branch(c, 64) + branch(c, 3)).sum();
    assert_eq!(v8_total, by_hand);
    assert_eq!(v8.levels.len(), 3);
}

#[test]
fn extra_levels_add_only_per_level_parts() {
    let per_level = |c: usize| GnConv::analytic_params(c, 8, 1) + 8 * 64 + 64 + 8 * 3 + 3 + 1;
    let two = GsdHead::analytic_params(3, 16, &[8, 16], 8);
    let three = GsdHead::analytic_params(3, 16, &[8, 16, 32], 8);
    assert_eq!(three - two, per_level(32));
    let mut b = Builder::new(0);
    GsdHead::new(&mut b, "two", 3, 16, &[8, 16], 8, 64).unwrap();
    assert_eq!(b.store().learnable_count(), two);
}

#[test]
fn head_passes_gradient_check() {
    for (name, r) in module_suite("gsd", 5, None).unwrap() {
        assert!(r.max_rel_err <= 1e-4, "{name}: {} at {:?}", r.max_rel_err, r.worst);
    }
}
