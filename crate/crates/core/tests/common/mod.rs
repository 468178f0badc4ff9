#![allow(dead_code)]

use kfg_core::nn::count_params;
use kfg_core::{Builder, Ctx, Mode, ParamId, ParamStore};
use kfg_tensor::{Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
}

/// Add `U(-amp, amp)` noise to every learnable parameter, so zero-initialized
/// layers (WGM output, branch biases) carry gradient signal.
pub fn jitter<T: Scalar>(store: &mut ParamStore<T>, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.learnable().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = *v + T::from_f64_lossy(rng.random_range(-amp..amp));
        }
    }
}

pub fn f64_store(b: Builder, seed: u64) -> ParamStore<f64> {
    let mut s = b.finish().cast::<f64>();
    jitter(&mut s, seed, 0.1);
    s
}

/// Evaluate `f` on constant inputs and return the values of its outputs.
pub fn run<T, F>(store: &ParamStore<T>, inputs: &[Tensor<T>], f: F) -> Vec<Tensor<T>>
where
    T: Scalar,
    F: Fn(&mut Ctx<'_, T>, &[Var]) -> Vec<Var>,
{
    let mut ctx = Ctx::new(store, Mode::EVAL);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.g.constant(t.clone())).collect();
    let outs = f(&mut ctx, &vars);
    outs.iter().map(|&v| ctx.g.value(v).clone()).collect()
}

pub fn learnable_total<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.learnable_count()
}

pub fn ids_total<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId]) -> usize {
    count_params(store, ids)
}

pub fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_rel_diff(b, 1e-9)
}
