//! Momentum SGD with L2 weight decay and a step learning-rate schedule.

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub epochs: usize,
    /// Epochs after this one (1-based) run at `lr · gamma`.
    pub lr_step: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            gamma: 0.1,
            epochs: 10,
            lr_step: 8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.gamma > 0.0
            && self.epochs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_step {
            self.lr * self.gamma
        } else {
            self.lr
        }
    }
}

/// Velocity buffers, one per parameter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sgd<T> {
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.velocity.get(id.0).and_then(|v| v.as_ref())
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Tensor<T>) {
        if self.velocity.len() <= id.0 {
            self.velocity.resize(id.0 + 1, None);
        }
        self.velocity[id.0] = Some(v);
    }
}

/// `v ← μv + g + λw`, `w ← w − ηv` on every learnable entry of `params`.
/// Frozen parameters are skipped; an unfrozen one without a gradient is an error.
pub fn sgd_step<T: Real>(
    store: &mut ParamStore<T>,
    opt: &mut Sgd<T>,
    params: &[ParamId],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    for &id in params {
        let p = store.get(id);
        if p.frozen {
            continue;
        }
        if p.grad.is_none() {
            return Err(Error::MissingGradient(p.name.clone()));
        }
    }
    for &id in params {
        let p = store.get_mut(id);
        if p.frozen {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above");
        let n = p.value.numel();
        if opt.velocity.len() <= id.0 {
            opt.velocity.resize(id.0 + 1, None);
        }
        let v = opt.velocity[id.0].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for i in 0..n {
            if !p.learn_mask.as_ref().is_none_or(|m| m[i]) {
                continue;
            }
            let w = p.value.data()[i];
            let vi = momentum * v.data()[i] + grad.data()[i] + weight_decay * w;
            v.data_mut()[i] = vi;
            p.value.data_mut()[i] = w - lr * vi;
        }
    }
    Ok(())
}
