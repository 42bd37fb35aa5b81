use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment accumulators for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.dims())).collect();
        AdamState {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update in place.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::contract(format!(
                "adam: {} params, {} grads, {} accumulators",
                store.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for id in store.ids() {
            let (p, g) = (store.get(id), grads.get(id));
            if p.dims() != g.dims() || p.dims() != self.first[id.index()].dims() {
                return Err(Error::contract(format!(
                    "adam: {} has dims {:?}, gradient {:?}",
                    store.name(id),
                    p.dims(),
                    g.dims()
                )));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids() {
            let g = grads.get(id).data();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] -= update;
            }
        }
        Ok(())
    }
}
