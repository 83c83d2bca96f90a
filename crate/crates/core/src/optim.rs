//! Momentum SGD and step-decay learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `lr(e) = initial_lr · decay^⌊e / period⌋` for `e < max_epochs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub initial_lr: f64,
    pub decay: f64,
    pub period: usize,
    pub max_epochs: usize,
}

impl Schedule {
    pub fn attention() -> Self {
        Schedule {
            initial_lr: 0.006,
            decay: 0.3,
            period: 2,
            max_epochs: 12,
        }
    }

    pub fn relation() -> Self {
        Schedule {
            initial_lr: 0.02,
            decay: 0.3,
            period: 6,
            max_epochs: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!("initial learning rate must be positive, got {}", self.initial_lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay factor must lie in (0, 1], got {}", self.decay)));
        }
        if self.period == 0 {
            return Err(Error::Config("decay period must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch >= self.max_epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} is beyond the schedule's {} epochs",
                self.max_epochs
            )));
        }
        Ok(self.initial_lr * self.decay.powi((epoch / self.period) as i32))
    }
}

/// Per-tensor update: `g' = g + λθ`, `v ← μv + g'`, `θ ← θ − η(g' + μv)`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    pub lr: T,
    pub step: usize,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T, lr: T) -> Self {
        Sgd {
            momentum,
            weight_decay,
            lr,
            step: 0,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&Tensor<T>> {
        self.velocity.get(index).and_then(Option::as_ref)
    }

    /// Updates every parameter with `trainable[i]`; others are untouched.
    /// Gradients are checked for non-finite entries before any update.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], trainable: &[bool]) -> Result<()> {
        if !(self.lr > T::zero()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if grads.len() != store.len() || trainable.len() != store.len() {
            return Err(Error::shape("one gradient and flag per parameter required"));
        }
        for (id, g) in store.ids().zip(grads) {
            if trainable[id.index()] {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::shape(format!("gradient shape mismatch for `{}`", store.name(id))));
                }
                if !g.all_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient for `{}`", store.name(id))));
                }
            }
        }
        self.velocity.resize(store.len(), None);
        let (mu, wd, lr) = (self.momentum, self.weight_decay, self.lr);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            if !trainable[i] {
                continue;
            }
            let theta = store.get_mut(id);
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(theta.shape()));
            let gd = grads[i].data();
            let vd = v.data_mut();
            for (k, th) in theta.data_mut().iter_mut().enumerate() {
                let g = gd[k] + wd * *th;
                vd[k] = mu * vd[k] + g;
                *th -= lr * (g + mu * vd[k]);
            }
        }
        self.step += 1;
        Ok(())
    }
}
