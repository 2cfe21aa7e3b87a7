//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::NamedCheckpoint;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only; norm scales are not decayed.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    /// Updates applied to this tensor; drives bias correction, so tensors
    /// that start training late are corrected from their own first step.
    t: u64,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    /// Optimizer steps taken.
    pub step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Shape of the accumulators for `name`, if it has been updated.
    pub fn moment_len(&self, name: &str) -> Option<usize> {
        self.moments.get(name).map(|m| m.m.len())
    }

    /// One update of a single tensor; returns the new value.
    pub fn update(&mut self, name: &str, param: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
        let c = self.config;
        if param.shape() != grad.shape() {
            return Err(Error::Contract(format!("gradient shape mismatch for {name}")));
        }
        let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; grad.numel()],
            v: vec![0.0; grad.numel()],
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - c.beta1.powi(st.t as i32);
        let bc2 = 1.0 - c.beta2.powi(st.t as i32);
        let decay = if param.ndim() >= 2 { c.weight_decay } else { 0.0 };
        let mut next = param.clone();
        for (i, x) in next.data_mut().iter_mut().enumerate() {
            let gi = grad.data()[i] as f64;
            let m = c.beta1 * st.m[i] as f64 + (1.0 - c.beta1) * gi;
            let v = c.beta2 * st.v[i] as f64 + (1.0 - c.beta2) * gi * gi;
            st.m[i] = m as f32;
            st.v[i] = v as f32;
            let upd = (m / bc1) / ((v / bc2).sqrt() + c.eps) + decay * *x as f64;
            *x -= (lr * upd) as f32;
        }
        Ok(next)
    }

    /// Updates every tensor named in `grads` at learning rate `lr`.
    pub fn apply(
        &mut self,
        ckpt: &mut NamedCheckpoint,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        for (name, g) in grads {
            let next = self.update(name, ckpt.tensor(name)?, g, lr)?;
            ckpt.set(name, next)?;
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}
