use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub lr: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = |p: &ParamStore| -> Vec<Vec<f32>> {
            p.iter().map(|(_, t)| vec![0.0; t.len()]).collect()
        };
        Self {
            config,
            lr: 0.0,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` is the gradient of parameter `i` (or
    /// `None` when it did not take part in the loss).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter #{i} at element {j} is {}",
                        g[j]
                    )));
                }
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let lr = self.lr;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            // parameters outside the graph are left untouched
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = 1.0 - lr * weight_decay;
            for j in 0..p.data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] = p.data[j] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as named tensors, for checkpointing.
    pub fn state_tensors(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (name, t)) in params.iter().enumerate() {
            out.push((
                format!("adamw.m.{name}"),
                Tensor::new(t.shape.clone(), self.m[i].clone()).unwrap(),
            ));
            out.push((
                format!("adamw.v.{name}"),
                Tensor::new(t.shape.clone(), self.v[i].clone()).unwrap(),
            ));
        }
        out
    }

    pub fn restore(
        &mut self,
        params: &ParamStore,
        step: u64,
        lookup: impl Fn(&str) -> Option<Tensor>,
    ) -> Result<()> {
        for (i, (name, t)) in params.iter().enumerate() {
            for (prefix, dst) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("adamw.{prefix}.{name}");
                let s = lookup(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                if s.shape != t.shape {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has wrong shape")));
                }
                *dst = s.data;
            }
        }
        self.step = step;
        Ok(())
    }
}
