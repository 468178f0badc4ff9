//! Overfitting a model on synthetic fixtures, used to show that every
//! variant trains end to end.

use kfg_core::loss::Target;
use kfg_core::train::{train_step, Sgd, StepReport};
use kfg_core::{Model, ModelConfig};

use crate::dataset::Sample;
use crate::error::Result;
use crate::eval::{evaluate_model, EvalConfig, MetricsReport};
use crate::image::to_batch;
use crate::synth::{synth_fixtures, FIXTURE_CLASSES, FIXTURE_SIZE};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub variant: String,
    pub fixtures: usize,
    pub iters: usize,
    pub lr: f32,
    pub seed: u64,
    /// Model width multiplier.
    pub width: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            variant: "kfg".into(),
            fixtures: 8,
            iters: 500,
            lr: 0.01,
            seed: 0,
            width: 0.25,
        }
    }
}

impl ToyConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::variant(&self.variant)?;
        cfg.nc = FIXTURE_CLASSES;
        cfg.imgsz = FIXTURE_SIZE;
        cfg.width = self.width;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub struct ToyRun {
    pub model: Model,
    pub samples: Vec<Sample>,
    pub steps: Vec<StepReport>,
}

pub fn targets(samples: &[Sample]) -> Vec<Vec<Target>> {
    samples
        .iter()
        .map(|s| {
            s.gts
                .iter()
                .map(|g| Target {
                    class: g.class,
                    bbox: g.bbox.as_array(),
                })
                .collect()
        })
        .collect()
}

/// Full-batch training on `synth_fixtures(fixtures, seed)`. `on_step` sees
/// each step's report as it happens.
pub fn train_toy(cfg: &ToyConfig, mut on_step: impl FnMut(usize, &StepReport)) -> Result<ToyRun> {
    let samples = synth_fixtures(cfg.fixtures, cfg.seed);
    let mut model = Model::build(&cfg.model_config()?, cfg.seed)?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let x = to_batch(&images)?;
    let t = targets(&samples);
    let mut opt = Sgd::new(cfg.lr);
    let mut steps = Vec::with_capacity(cfg.iters);
    for i in 0..cfg.iters {
        let r = train_step(&mut model, &mut opt, &x, &t)?;
        on_step(i, &r);
        steps.push(r);
    }
    Ok(ToyRun { model, samples, steps })
}

impl ToyRun {
    pub fn evaluate(&self, cfg: EvalConfig) -> Result<MetricsReport> {
        evaluate_model(&self.model, &self.samples, cfg)
    }
}
