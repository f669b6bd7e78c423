//! Adam with bias correction.

use crate::element::Element;
use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;
use crate::tensor::Tensor;
use crate::TensorError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.0, beta2: 0.9, eps: 1e-8 }
    }
}

/// Per-parameter moment estimates plus a per-parameter step count, so
/// parameters that sit out a step keep their bias correction exact.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: Vec<Option<AdamSlot<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self { config, state: vec![None; n_params] }
    }

    /// Apply one update to every parameter that has a gradient. Refuses to
    /// touch anything when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<Vec<ParamId>, TensorError> {
        let ids = grads.param_ids();
        for &id in &ids {
            let g = grads.param(id).expect("listed id has a gradient");
            if !g.is_finite() {
                return Err(TensorError::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        let c = self.config;
        for &id in &ids {
            let g = grads.param(id).expect("listed id has a gradient");
            let slot = self.state[id.0].get_or_insert_with(|| AdamSlot {
                step: 0,
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            slot.step += 1;
            let b1 = T::of(c.beta1);
            let b2 = T::of(c.beta2);
            let one = T::one();
            let bc1 = T::of(1.0 - c.beta1.powi(slot.step as i32));
            let bc2 = T::of(1.0 - c.beta2.powi(slot.step as i32));
            let lr = T::of(c.lr);
            let eps = T::of(c.eps);
            let p = store.get_mut(id);
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.data_mut().iter_mut())
                .zip(slot.v.data_mut().iter_mut())
            {
                *m = b1 * *m + (one - b1) * gi;
                *v = b2 * *v + (one - b2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(ids)
    }
}
