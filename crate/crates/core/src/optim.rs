//! Adam with the AMSGrad variant, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub amsgrad: bool,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, amsgrad: bool) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            amsgrad,
        }
    }
}

/// Bias-corrected Adam. With `amsgrad` the running maximum of the second
/// moment replaces the second moment in the denominator.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    v_max: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            v_max: if config.amsgrad { zeros() } else { Vec::new() },
        }
    }

    pub fn for_params(config: AdamConfig, params: &[Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(Tensor::shape).collect();
        Self::new(config, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter count mismatch");
        assert_eq!(grads.len(), self.m.len(), "optimizer/gradient count mismatch");
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2_sqrt = (1.0 - c.beta2.powi(t)).sqrt();
        let lr = c.learning_rate / bc1;
        for k in 0..params.len() {
            let p = params[k].data_mut();
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            }
            let second: &[f64] = if c.amsgrad {
                let vm = self.v_max[k].data_mut();
                for i in 0..p.len() {
                    vm[i] = vm[i].max(v[i]);
                }
                self.v_max[k].data()
            } else {
                self.v[k].data()
            };
            let m = self.m[k].data();
            for i in 0..p.len() {
                p[i] -= lr * m[i] / (second[i].sqrt() / bc2_sqrt + c.eps);
            }
        }
    }

    /// Moment arrays under `adam.<moment>.<name>` for checkpointing.
    pub fn export(&self, names: &[String]) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::new();
        for (label, arrays) in [("m", &self.m), ("v", &self.v), ("vmax", &self.v_max)] {
            for (n, t) in names.iter().zip(arrays.iter()) {
                out.push((format!("adam.{label}.{n}"), t.clone()));
            }
        }
        (self.step, out)
    }

    /// Restores state written by [`Adam::export`].
    pub fn import(
        config: AdamConfig,
        names: &[String],
        params: &[Tensor],
        step: u64,
        arrays: &[(String, Tensor)],
    ) -> Result<Self> {
        let mut adam = Self::for_params(config, params);
        adam.step = step;
        let lookup = |key: String, shape: &[usize]| -> Result<Tensor> {
            let t = arrays
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Validation(format!("optimizer state missing {key}")))?;
            if t.shape() != shape {
                return Err(Error::Validation(format!("optimizer state {key} has wrong shape")));
            }
            Ok(t)
        };
        for (k, n) in names.iter().enumerate() {
            let shape = params[k].shape();
            adam.m[k] = lookup(format!("adam.m.{n}"), shape)?;
            adam.v[k] = lookup(format!("adam.v.{n}"), shape)?;
            if config.amsgrad {
                adam.v_max[k] = lookup(format!("adam.vmax.{n}"), shape)?;
            }
        }
        Ok(adam)
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}
