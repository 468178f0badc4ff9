//! Named parameter storage and the per-pass forward context.
//!
//! Blocks hold [`ParamId`] handles into a [`ParamStore`]; the store owns the
//! tensors. Storage shared between layers (kernel warehouses) exists once
//! and is referenced by extra alias names, so there is exactly one registry
//! name per learnable scalar.

use std::collections::HashMap;
use std::sync::Arc;

use kfg_tensor::{BatchNormMode, Graph, Scalar, StatUpdate, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by gradient descent and counted by audits.
    Learnable,
    /// Running statistics; saved with the weights, never counted.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub kind: ParamKind,
    /// Referenced by more than one layer.
    pub shared: bool,
}

/// Additional name under which a layer refers to shared storage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alias {
    pub name: String,
    pub target: ParamId,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    aliases: Vec<Alias>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            aliases: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(CoreError::DuplicateParam(name));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            kind,
            shared: false,
        });
        Ok(id)
    }

    pub fn add_alias(&mut self, name: impl Into<String>, target: ParamId) -> Result<()> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(CoreError::DuplicateParam(name));
        }
        self.entries[target.0].shared = true;
        self.by_name.insert(name.clone(), target);
        self.aliases.push(Alias { name, target });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn aliases(&self) -> &[Alias] {
        &self.aliases
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    /// Resolves entry and alias names alike.
    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Mutable access; clones the storage first if a graph still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(CoreError::Config(format!(
                "{}: shape {:?} cannot be replaced by {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    pub fn learnable(&self) -> impl Iterator<Item = (ParamId, &Entry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Learnable)
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Learnable scalars, each storage counted once.
    pub fn learnable_count(&self) -> usize {
        self.learnable().map(|(_, e)| e.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: Arc::new(e.value.cast()),
                    kind: e.kind,
                    shared: e.shared,
                })
                .collect(),
            aliases: self.aliases.clone(),
            by_name: self.by_name.clone(),
        }
    }

    /// Fold batch statistics into running buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    /// The update key is the running-mean id; the variance follows it.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>], momentum: T) {
        for u in updates {
            let keep = T::one() - momentum;
            for (id, batch) in [(u.key, &u.mean), (u.key + 1, &u.var)] {
                let run = self.value_mut(ParamId(id));
                for (r, &b) in run.data_mut().iter_mut().zip(batch.iter()) {
                    *r = keep * *r + momentum * b;
                }
            }
        }
    }
}

/// Allocates and initializes parameters while blocks are constructed.
pub struct Builder {
    store: ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn finish(self) -> ParamStore<f32> {
        self.store
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::rand_uniform(shape.to_vec(), -bound, bound, &mut self.rng);
        self.store.add(name, t, ParamKind::Learnable)
    }

    pub fn full(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape.to_vec(), value), ParamKind::Learnable)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.full(name, shape, 0.0)
    }

    /// Running mean and variance buffers, allocated adjacently.
    pub fn running_stats(&mut self, name: &str, c: usize) -> Result<(ParamId, ParamId)> {
        let mean = self
            .store
            .add(format!("{name}.running_mean"), Tensor::zeros([c]), ParamKind::Buffer)?;
        let var = self
            .store
            .add(format!("{name}.running_var"), Tensor::ones([c]), ParamKind::Buffer)?;
        Ok((mean, var))
    }

    pub fn alias(&mut self, name: impl Into<String>, target: ParamId) -> Result<()> {
        self.store.add_alias(name, target)
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

/// How a forward pass treats normalization and gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Batch norm uses batch statistics and reports them for running updates.
    pub batch_stats: bool,
    /// Learnable parameters enter the graph as gradient-requiring leaves.
    pub grad: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        batch_stats: true,
        grad: true,
    };
    pub const EVAL: Mode = Mode {
        batch_stats: false,
        grad: false,
    };
    /// Running statistics, but with parameter gradients (gradient checks).
    pub const EVAL_GRAD: Mode = Mode {
        batch_stats: false,
        grad: true,
    };
}

/// One forward pass: a fresh graph plus read access to the parameters.
pub struct Ctx<'s, T: Scalar> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    pub mode: Mode,
    pub bn_eps: T,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            mode,
            bn_eps: T::from_f64_lossy(1e-3),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let e = self.store.entry(id);
        let grad = self.mode.grad && e.kind == ParamKind::Learnable;
        self.g.param(id.0, &e.value, grad)
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId) -> Result<Var> {
        let (gv, bv) = (self.param(gamma), self.param(beta));
        let mode = BatchNormMode {
            running_mean: self.store.value(mean).data(),
            running_var: self.store.value(var).data(),
            eps: self.bn_eps,
            train: self.mode.batch_stats,
            stat_key: Some(mean.0),
        };
        Ok(self.g.batch_norm(x, gv, bv, mode)?)
    }
}
