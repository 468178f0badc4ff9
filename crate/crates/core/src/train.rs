//! One optimization step: forward in training mode, loss, backward, SGD
//! update of learnable parameters and running-statistic updates.

use std::collections::HashMap;

use kfg_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::loss::{detection_loss, LossWeights, Target};
use crate::model::Model;
use crate::params::{Ctx, Mode, ParamId};

/// Batch-norm running statistics follow batch statistics at this rate.
pub const BN_MOMENTUM: f32 = 0.03;

/// SGD with heavy-ball momentum, optional L2 weight decay and global
/// gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub clip_norm: Option<f32>,
    velocity: HashMap<ParamId, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32) -> Self {
        Sgd {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: Some(10.0),
            velocity: HashMap::new(),
        }
    }

    /// Plain gradient descent, no momentum or clipping.
    pub fn plain(lr: f32) -> Self {
        Sgd {
            momentum: 0.0,
            clip_norm: None,
            ..Sgd::new(lr)
        }
    }

    /// Apply `grads` to `model`, returning the pre-clip global norm.
    pub fn step(&mut self, model: &mut Model, grads: &[(ParamId, Tensor<f32>)]) -> f32 {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt() as f32;
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (id, g) in grads {
            let w = model.store.value_mut(*id);
            let vel = self.velocity.entry(*id).or_insert_with(|| vec![0.0; g.numel()]);
            for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                let d = g * scale + self.weight_decay * *w;
                *v = self.momentum * *v + d;
                *w -= self.lr * *v;
            }
        }
        norm
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub loss: f64,
    pub box_loss: f64,
    pub cls_loss: f64,
    pub dfl_loss: f64,
    pub grad_norm: f32,
    pub assigned: usize,
    pub unassigned: usize,
}

pub type ParamGrads = Vec<(ParamId, Tensor<f32>)>;

/// Loss and parameter gradients for one batch in training mode, without
/// touching the model.
pub fn loss_and_grads(
    model: &Model,
    images: &Tensor<f32>,
    targets: &[Vec<Target>],
    weights: LossWeights,
) -> Result<(StepReport, ParamGrads, Vec<kfg_tensor::StatUpdate<f32>>)> {
    if targets.len() != images.shape()[0] {
        return Err(CoreError::structure(
            "train",
            format!("{} target lists for a batch of {}", targets.len(), images.shape()[0]),
        ));
    }
    let mut ctx = Ctx::new(&model.store, Mode::TRAIN);
    let x = ctx.g.constant(images.clone());
    let outs = model.forward(&mut ctx, x)?;
    let parts = detection_loss(&mut ctx.g, &outs, targets, model.cfg.reg_max, weights)?;
    let grads = ctx.g.backward(parts.total)?;
    let stats = ctx.g.take_stat_updates();
    let grads = grads.into_keyed().into_iter().map(|(k, t)| (ParamId(k), t)).collect();
    let report = StepReport {
        loss: parts.total_value,
        box_loss: parts.box_loss,
        cls_loss: parts.cls_loss,
        dfl_loss: parts.dfl_loss,
        grad_norm: 0.0,
        assigned: parts.assigned,
        unassigned: parts.unassigned,
    };
    Ok((report, grads, stats))
}

pub fn train_step(model: &mut Model, opt: &mut Sgd, images: &Tensor<f32>, targets: &[Vec<Target>]) -> Result<StepReport> {
    let (mut report, grads, stats) = loss_and_grads(model, images, targets, LossWeights::default())?;
    report.grad_norm = opt.step(model, &grads);
    model.store.apply_stat_updates(&stats, BN_MOMENTUM);
    Ok(report)
}
