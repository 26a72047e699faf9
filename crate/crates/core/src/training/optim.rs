use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::layers::project_max_norm;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay:
/// `θ ← θ − lr · (m̂ / (√v̂ + ε) + wd · θ)`, followed by max-norm projection
/// of constrained parameters.
#[derive(Debug, Clone)]
pub struct AdamW<F: Scalar> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor<F>>>,
    second: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that has a gradient; parameters
    /// without one are left untouched (no decay either).
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Training(format!(
                "learning rate {lr} must be positive"
            )));
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = F::lit(c.beta1);
        let b2 = F::lit(c.beta2);
        let one = F::one();
        let bc1 = F::lit(1.0 - c.beta1.powi(t));
        let bc2 = F::lit(1.0 - c.beta2.powi(t));
        let lr = F::lit(lr);
        let wd = F::lit(c.weight_decay);
        let eps = F::lit(c.eps);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adamw", p.value.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for {}",
                    p.name
                )));
            }
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(md).zip(vd)
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w = *w - lr * (update + wd * *w);
            }
            if let Some(limit) = p.max_norm {
                project_max_norm(&mut p.value, limit)?;
            }
        }
        Ok(())
    }
}
