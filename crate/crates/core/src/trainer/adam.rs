//! Bias-corrected Adam with optional weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `θ ← θ − lr·wd·θ` after the moment update instead of adding `wd·θ`
    /// to the gradient.
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64, decoupled: bool) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decoupled,
        }
    }
}

/// Moments per parameter tensor, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter from its accumulated gradient. Tensors
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (name, tensor)) in store.iter_mut().enumerate() {
            let n = tensor.numel();
            if self.m[i].len() != n {
                return Err(Error::Contract(format!(
                    "optimizer moment for {name} has {} entries, parameter has {n}",
                    self.m[i].len()
                )));
            }
            let grad: Vec<T> = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); n],
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in tensor.data_mut().iter_mut().enumerate() {
                let theta = w.f64();
                let mut g = grad[j].f64();
                if !c.decoupled {
                    g += c.weight_decay * theta;
                }
                let mj = c.beta1 * m[j].f64() + (1.0 - c.beta1) * g;
                let vj = c.beta2 * v[j].f64() + (1.0 - c.beta2) * g * g;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let mut next = theta - c.lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                if c.decoupled {
                    next -= c.lr * c.weight_decay * theta;
                }
                *w = T::of(next);
            }
        }
        Ok(())
    }
}
