//! Adam and the training schedule.

use longscape_tensor::{Element, Gradients};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub warmup_iters: u64,
    pub epochs: u64,
    pub lr_drop_epoch: u64,
    pub lr_drop_factor: f64,
    pub n_cir_high: u32,
    pub n_cir_low: u32,
    pub n_cir_threshold: u64,
    pub n_cir_period: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            base_lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            adam_eps: 1e-8,
            batch: 32,
            warmup_iters: 1000,
            epochs: 1500,
            lr_drop_epoch: 1000,
            lr_drop_factor: 10.0,
            n_cir_high: 30,
            n_cir_low: 5,
            n_cir_threshold: 30,
            n_cir_period: 500,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.base_lr, self.adam_eps, self.lr_drop_factor];
        let unit = [self.beta1, self.beta2];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || unit.iter().any(|v| !(0.0..1.0).contains(v))
            || self.batch == 0
            || self.epochs == 0
            || self.n_cir_period == 0
            || self.n_cir_high == 0
            || self.n_cir_low == 0
        {
            return Err(Error::Config(format!("invalid training schedule: {self:?}")));
        }
        Ok(())
    }
}

/// Learning rate for an epoch: the base rate, divided after the drop epoch.
pub fn lr_at(epoch: u64, s: &TrainSchedule) -> f64 {
    if epoch < s.lr_drop_epoch {
        s.base_lr
    } else {
        s.base_lr / s.lr_drop_factor
    }
}

/// Critic updates per generator update at (1-based) adversarial iteration `it`.
pub fn n_cir(it: u64, s: &TrainSchedule) -> u32 {
    if it < s.n_cir_threshold || it % s.n_cir_period == 0 {
        s.n_cir_high
    } else {
        s.n_cir_low
    }
}

/// One bias-corrected Adam update of every parameter in `store`. The
/// gradients are also kept in each parameter's gradient slot.
pub fn adam_step<T: Element>(store: &mut ParamStore<T>, grads: &mut Gradients<T>, lr: f64, s: &TrainSchedule) -> Result<()> {
    if let Some(name) = store.names().find(|n| grads.get(n).is_none()) {
        return Err(Error::MissingGradient(name.to_string()));
    }
    store.steps += 1;
    let t = store.steps as i32;
    let c1 = 1.0 - s.beta1.powi(t);
    let c2 = 1.0 - s.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(s.beta1), T::from_f64_lossy(s.beta2));
    let (nb1, nb2) = (T::from_f64_lossy(1.0 - s.beta1), T::from_f64_lossy(1.0 - s.beta2));
    let (ic1, ic2) = (T::from_f64_lossy(1.0 / c1), T::from_f64_lossy(1.0 / c2));
    let step = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(s.adam_eps);

    for (name, p) in store.iter_mut() {
        let g = grads.take(name).expect("checked above");
        if g.shape() != p.value.shape() {
            return Err(Error::Config(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
        let mut value = (*p.value).clone();
        for (((w, m), v), &gi) in value
            .data_mut()
            .iter_mut()
            .zip(p.m.data_mut())
            .zip(p.v.data_mut())
            .zip(g.data())
        {
            *m = b1 * *m + nb1 * gi;
            *v = b2 * *v + nb2 * gi * gi;
            let mhat = *m * ic1;
            let vhat = *v * ic2;
            *w = *w - step * mhat / (vhat.sqrt() + eps);
        }
        p.value = std::sync::Arc::new(value);
        p.grad = g;
    }
    Ok(())
}
