//! Step-decayed learning rates and momentum SGD with global-norm clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSchedule {
    pub initial_lr: f64,
    pub momentum: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
}

impl OptimizerSchedule {
    pub fn pretrain() -> Self {
        Self { initial_lr: 1.0e-3, momentum: 0.96, decay: 0.65, decay_every: 2 }
    }

    pub fn full() -> Self {
        Self { initial_lr: 6.0e-4, momentum: 0.90, decay: 0.85, decay_every: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.decay > 0.0) || self.decay_every == 0 {
            return Err(invalid!("invalid optimizer schedule {self:?}"));
        }
        Ok(())
    }

    /// initial × decay^⌊epoch / decay_every⌋.
    pub fn lr(&self, epoch: usize) -> f64 {
        self.initial_lr * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// v ← μ·v + g; θ ← θ − lr·v, over the trainable parameters of a store.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, clip_norm: Option<f64>) -> Self {
        Self { momentum, clip_norm, velocity: BTreeMap::new() }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor>) {
        self.velocity = velocity;
    }

    /// Applies one update; returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<f64> {
        let params: Vec<_> = store.trainable().filter_map(|(n, v)| grads.get(v.as_tensor()).map(|g| (n, v, g))).collect();
        let mut sq = 0.0f64;
        for (_, _, g) in &params {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let norm = sq.sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, var, g) in params {
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g.clone() };
            let v = match self.velocity.get(name) {
                Some(prev) => (prev.affine(self.momentum, 0.0)? + g)?,
                None => g,
            };
            var.set(&(var.as_tensor() - v.affine(lr, 0.0)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(norm)
    }
}
