use kfg_tensor::{
    grad_check, grad_check_hooked, grad_check_with, random_projection, BatchNormMode, Conv2dParams,
    GradCheckConfig, Graph, Pool2dParams, Tensor, TensorError, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn eval_mode<'a>(mean: &'a [f64], var: &'a [f64], eps: f64) -> BatchNormMode<'a, f64> {
    BatchNormMode {
        running_mean: mean,
        running_var: var,
        eps,
        train: false,
        stat_key: None,
    }
}

// ---- conv2d -----------------------------------------------------------------

#[test]
fn conv_all_ones_center_and_corners() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones([1, 1, 3, 3]));
    let w = g.constant(Tensor::ones([1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, Conv2dParams::new(1, 1)).unwrap();
    let out = g.value(y);
    assert_eq!(out.at(&[0, 0, 1, 1]), 9.0);
    for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        assert_eq!(out.at(&[0, 0, i, j]), 4.0);
    }
    assert_eq!(out.at(&[0, 0, 0, 1]), 6.0);
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::<f64>::new();
    let xt = Tensor::<f64>::rand_uniform([2, 1, 5, 4], -1.0, 1.0, &mut rng(1));
    let x = g.constant(xt.clone());
    let w = g.constant(Tensor::ones([1, 1, 1, 1]));
    let y = g.conv2d(x, w, None, Conv2dParams::default()).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn conv_stride_two_shape() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 16, 64, 64]));
    let w = g.constant(Tensor::zeros([32, 16, 3, 3]));
    let y = g.conv2d(x, w, None, Conv2dParams::new(2, 1)).unwrap();
    assert_eq!(g.shape(y), &[1, 32, 32, 32]);
}

#[test]
fn conv_mismatch_names_dimension() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 3, 8, 8]));
    let w = g.constant(Tensor::zeros([4, 2, 3, 3]));
    let err = g.conv2d(x, w, None, Conv2dParams::new(1, 1)).unwrap_err();
    assert!(err.to_string().contains("weight input channels"), "{err}");
    let b = g.constant(Tensor::zeros([5]));
    let w = g.constant(Tensor::zeros([4, 3, 3, 3]));
    let err = g.conv2d(x, w, Some(b), Conv2dParams::new(1, 1)).unwrap_err();
    assert!(err.to_string().contains("bias length"), "{err}");
}

// ---- pooling / upsample / concat ---------------------------------------------

#[test]
fn max_pool_on_constant_is_constant() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([1, 2, 6, 6], 3.5));
    let y = g.max_pool2d(x, Pool2dParams::new(5, 1, 2)).unwrap();
    assert_eq!(g.value(y), &Tensor::full([1, 2, 6, 6], 3.5));
}

#[test]
fn avg_pool_two_by_two() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.avg_pool2d(x, Pool2dParams::new(2, 2, 0)).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
}

#[test]
fn avg_pool_counts_padding() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones([1, 1, 2, 2]));
    let y = g.avg_pool2d(x, Pool2dParams::new(3, 1, 1)).unwrap();
    // Every 3x3 window covers exactly the four ones plus five zero pads.
    assert!(g.value(y).data().iter().all(|&v| (v - 4.0 / 9.0).abs() < 1e-15));
}

#[test]
fn max_pool_shape_and_bad_geometry() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 3, 8, 8]));
    let y = g.max_pool2d(x, Pool2dParams::new(2, 2, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 4, 4]);
    assert!(g.max_pool2d(x, Pool2dParams::new(2, 1, 2)).is_err());
    assert!(g.max_pool2d(x, Pool2dParams::new(0, 1, 0)).is_err());
}

#[test]
fn upsample_cases() {
    let mut g = Graph::<f64>::new();
    let src = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let x = g.constant(src.clone());
    let same = g.upsample_nearest(x, 1).unwrap();
    assert_eq!(g.value(same), &src);
    let up = g.upsample_nearest(x, 2).unwrap();
    assert_eq!(
        g.value(up).data(),
        &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
    let big = g.constant(Tensor::zeros([1, 8, 20, 20]));
    let big = g.upsample_nearest(big, 2).unwrap();
    assert_eq!(g.shape(big), &[1, 8, 40, 40]);
}

#[test]
fn concat_cases() {
    let mut g = Graph::<f64>::new();
    let a = Tensor::<f64>::rand_uniform([1, 4, 8, 8], -1.0, 1.0, &mut rng(2));
    let b = Tensor::<f64>::rand_uniform([1, 4, 8, 8], -1.0, 1.0, &mut rng(3));
    let (va, vb) = (g.constant(a.clone()), g.constant(b));
    let cat = g.concat_channels(&[va, vb]).unwrap();
    assert_eq!(g.shape(cat), &[1, 8, 8, 8]);
    assert_eq!(g.value(cat).narrow(1, 0, 4).unwrap(), a);
    let single = g.concat_channels(&[va]).unwrap();
    assert_eq!(g.value(single), &a);
    let odd = g.constant(Tensor::zeros([1, 4, 4, 8]));
    let err = g.concat_channels(&[va, odd]).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { dim: "height", .. }));
}

// ---- normalization ----------------------------------------------------------

#[test]
fn batch_norm_eval_identity() {
    let mut g = Graph::<f64>::new();
    let xt = Tensor::<f64>::rand_uniform([2, 3, 4, 4], -2.0, 2.0, &mut rng(4));
    let x = g.constant(xt.clone());
    let gamma = g.constant(Tensor::ones([3]));
    let beta = g.constant(Tensor::zeros([3]));
    let (m, v) = ([0.0; 3], [1.0; 3]);
    let y = g.batch_norm(x, gamma, beta, eval_mode(&m, &v, 1e-12)).unwrap();
    assert!(g.value(y).max_abs_diff(&xt) < 1e-10);
}

#[test]
fn batch_norm_train_two_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 1, 1, 1], &[1.0, 3.0]));
    let gamma = g.constant(Tensor::ones([1]));
    let beta = g.constant(Tensor::zeros([1]));
    let (m, v) = ([0.0], [1.0]);
    let mode = BatchNormMode {
        train: true,
        stat_key: Some(7),
        ..eval_mode(&m, &v, 1e-3)
    };
    let y = g.batch_norm(x, gamma, beta, mode).unwrap();
    let out = g.value(y).data();
    let expect = 1.0 / (1.0f64 + 1e-3).sqrt();
    assert!((out[0] + expect).abs() < 1e-12 && (out[1] - expect).abs() < 1e-12);
    let upd = g.take_stat_updates();
    assert_eq!(upd.len(), 1);
    assert_eq!(upd[0].key, 7);
    assert_eq!(upd[0].mean, vec![2.0]);
    // Unbiased variance of {1, 3}.
    assert_eq!(upd[0].var, vec![2.0]);
}

#[test]
fn batch_norm_affine_collapse() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::rand_uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng(5)));
    let gamma = g.constant(Tensor::zeros([2]));
    let beta = g.constant(Tensor::full([2], 5.0));
    let (m, v) = ([0.3, -0.2], [1.5, 0.7]);
    let y = g.batch_norm(x, gamma, beta, eval_mode(&m, &v, 1e-3)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn group_norm_constant_input_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([2, 4, 3, 3], 1.7));
    let gamma = g.constant(Tensor::ones([4]));
    let beta = g.constant(Tensor::zeros([4]));
    let y = g.group_norm(x, 2, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn group_norm_boundary_cases() {
    let xt = Tensor::<f64>::rand_uniform([2, 4, 3, 3], -1.0, 1.0, &mut rng(6));
    let mut g = Graph::<f64>::new();
    let x = g.constant(xt.clone());
    let gamma = g.constant(Tensor::ones([4]));
    let beta = g.constant(Tensor::zeros([4]));
    // groups == C: each channel of each sample is standardized on its own.
    let inst = g.group_norm(x, 4, gamma, beta, 1e-5).unwrap();
    for n in 0..2 {
        for c in 0..4 {
            let plane = g.value(inst).narrow(0, n, 1).unwrap().narrow(1, c, 1).unwrap();
            let mean = plane.sum() / 9.0;
            let var = plane.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
        }
    }
    // groups == 1: all channels of a sample share one mean/variance.
    let layer = g.group_norm(x, 1, gamma, beta, 1e-5).unwrap();
    for n in 0..2 {
        let s = g.value(layer).narrow(0, n, 1).unwrap();
        let mean = s.sum() / 36.0;
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
    }
    assert!(g.group_norm(x, 3, gamma, beta, 1e-5).is_err());
}

#[test]
fn group_norm_two_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 2, 1, 1], &[0.0, 2.0]));
    let gamma = g.constant(Tensor::ones([2]));
    let beta = g.constant(Tensor::zeros([2]));
    let y = g.group_norm(x, 1, gamma, beta, 1e-12).unwrap();
    let out = g.value(y).data();
    assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);
}

// ---- activations, linear, pooling -------------------------------------------

#[test]
fn activation_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[0.0, 1.0]));
    let s = g.silu(x).unwrap();
    let sg = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[0], 0.0);
    assert_eq!(g.value(sg).data()[0], 0.5);
    let silu1 = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((g.value(s).data()[1] - silu1).abs() < 1e-15);
    assert!((silu1 - 0.731058).abs() < 1e-6);
    let logits = g.constant(Tensor::full([3, 5], 0.7));
    let p = g.softmax(logits, 1).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    assert!(g.softmax(logits, 2).is_err());
}

#[test]
fn linear_cases() {
    let mut g = Graph::<f64>::new();
    let xt = Tensor::<f64>::rand_uniform([3, 4], -1.0, 1.0, &mut rng(7));
    let x = g.constant(xt.clone());
    let eye = g.constant(Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let zero = g.constant(Tensor::zeros([4]));
    let y = g.linear(x, eye, Some(zero)).unwrap();
    assert_eq!(g.value(y), &xt);

    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[1, 2], &[1.0, 1.0]));
    let b = g.constant(t(&[1], &[0.5]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[3.5]);

    let x = g.constant(Tensor::zeros([4, 16]));
    let w = g.constant(Tensor::zeros([8, 16]));
    let y = g.linear(x, w, None).unwrap();
    assert_eq!(g.shape(y), &[4, 8]);
    let bad = g.constant(Tensor::zeros([8, 15]));
    assert!(g.linear(x, bad, None).is_err());
}

#[test]
fn global_avg_pool_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([1, 3, 4, 4], 2.25));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).data(), &[2.25; 3]);
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
    let x = g.constant(Tensor::zeros([2, 8, 10, 10]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.shape(y), &[2, 8]);
}

// ---- backward ---------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::rand_uniform([2, 3], -1.0, 1.0, &mut rng(8)));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), Tensor::ones([2, 3]));
}

#[test]
fn backward_of_silu_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros([4]));
    let y = g.silu(x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.5; 4]);
}

#[test]
fn backward_accumulates_reuse() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::rand_uniform([3], -1.0, 1.0, &mut rng(9)));
    let y = g.add(x, x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0; 3]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::<f64>::zeros([2]));
    assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[1.0, -1.0]));
    assert!(matches!(g.log(x), Err(TensorError::NonFinite { op: "log" })));
}

#[test]
fn keyed_params_are_deduplicated() {
    let mut g = Graph::<f64>::new();
    let w = std::sync::Arc::new(Tensor::full([2], 3.0));
    let a = g.param(11, &w, true);
    let b = g.param(11, &w, true);
    assert_eq!(a, b);
    let y = g.mul(a, b).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.keyed(11).unwrap().data(), &[6.0, 6.0]);
}

// ---- grad_check -------------------------------------------------------------

#[test]
fn grad_check_conv_random_kernel() {
    let x = Tensor::rand_uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng(10));
    let w = Tensor::rand_uniform([3, 2, 3, 3], -1.0, 1.0, &mut rng(11));
    let err = grad_check(
        |g, x| {
            let w = g.constant(w.clone());
            let y = g.conv2d(x, w, None, Conv2dParams::new(1, 1))?;
            random_projection(g, y, 1)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-5, "max rel err {err}");
}

#[test]
fn grad_check_constant_function() {
    let x = Tensor::rand_uniform([3], -1.0, 1.0, &mut rng(12));
    let err = grad_check(
        |g, _x| {
            let c = g.constant(Tensor::scalar(4.0));
            Ok(c)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_group_norm() {
    let x = Tensor::rand_uniform([1, 4, 3, 3], -1.0, 1.0, &mut rng(13));
    let err = grad_check(
        |g, x| {
            let gamma = g.constant(Tensor::from_fn([4], |i| 0.5 + i as f64 * 0.25));
            let beta = g.constant(Tensor::from_fn([4], |i| i as f64 * 0.1));
            let y = g.group_norm(x, 2, gamma, beta, 1e-5)?;
            random_projection(g, y, 2)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-4, "max rel err {err}");
}

#[test]
fn sign_flip_fault_is_detected() {
    let x = Tensor::rand_uniform([2, 3], -1.0, 1.0, &mut rng(14));
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.silu(v[0])?;
        random_projection(g, y, 3)
    };
    let clean = grad_check_with(f, std::slice::from_ref(&x), GradCheckConfig::default()).unwrap();
    assert!(clean.max_rel_err < 1e-6);
    let broken = grad_check_hooked(
        f,
        std::slice::from_ref(&x),
        GradCheckConfig::default(),
        |g| g.inject_sign_flip("silu"),
    )
    .unwrap();
    assert!(broken.max_rel_err > 1.0);
}
