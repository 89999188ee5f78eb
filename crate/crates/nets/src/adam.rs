//! Adam with a constant learning rate.

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.values.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let step_size = T::from_f64_lossy(self.cfg.lr / (1.0 - b1.powi(t)));
        let v_corr = T::from_f64_lossy(1.0 / (1.0 - b2.powi(t)));
        let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let eps = T::from_f64_lossy(self.cfg.eps);
        let one = T::one();
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(&grads.values)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                p[i] = p[i] - step_size * m[i] / ((v[i] * v_corr).sqrt() + eps);
            }
        }
    }
}
