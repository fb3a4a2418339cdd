//! Adam with global-norm clipping and exportable moment state.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, clip_norm: 5.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.clip_norm >= 0.0;
        if !ok {
            return Err(Error::validation(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment estimates for every parameter of one store, in store order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    names: Vec<String>,
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// Statistics of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut vars = Vec::new();
        let mut m = Vec::new();
        for (name, var) in store.params() {
            names.push(name.clone());
            vars.push(var.clone());
            m.push(var.as_tensor().zeros_like()?);
        }
        let v = m.clone();
        Ok(Self { config, t: 0, names, vars, m, v })
    }

    /// Gradients in store order; parameters the loss does not reach get zeros.
    pub fn gradients(&self, grads: &GradStore) -> Result<Vec<Tensor>> {
        self.vars
            .iter()
            .map(|var| match grads.get(var.as_tensor()) {
                Some(g) => Ok(g.detach()),
                None => Ok(var.as_tensor().zeros_like()?),
            })
            .collect()
    }

    pub fn global_norm(grads: &[Tensor]) -> Result<f64> {
        let mut sq = 0f64;
        for g in grads {
            sq += g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(sq.sqrt())
    }

    /// Clips, then applies one bias-corrected update.
    pub fn step(&mut self, grads: &GradStore) -> Result<StepStats> {
        let mut g = self.gradients(grads)?;
        let norm = Self::global_norm(&g)?;
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at update {}", self.t + 1)));
        }
        let clipped = self.config.clip_norm > 0.0 && norm > self.config.clip_norm;
        if clipped {
            let scale = self.config.clip_norm / norm;
            g = g.into_iter().map(|t| t * scale).collect::<candle_core::Result<_>>()?;
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..self.vars.len() {
            self.m[i] = ((&self.m[i] * c.beta1)? + (&g[i] * (1.0 - c.beta1))?)?.detach();
            self.v[i] = ((&self.v[i] * c.beta2)? + (g[i].sqr()? * (1.0 - c.beta2))?)?.detach();
            let m_hat = (&self.m[i] / bc1)?;
            let v_hat = (&self.v[i] / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.epsilon)?)?;
            let next = (self.vars[i].as_tensor() - (update * c.learning_rate)?)?.detach();
            self.vars[i].set(&next)?;
        }
        Ok(StepStats { grad_norm: norm, clipped })
    }

    /// Moment tensors named `adam.m.<param>` / `adam.v.<param>`.
    pub fn named_state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.names.len());
        for (i, n) in self.names.iter().enumerate() {
            out.push((format!("adam.m.{n}"), self.m[i].clone()));
            out.push((format!("adam.v.{n}"), self.v[i].clone()));
        }
        out
    }

    /// Restores moments from `lookup(name)`; every moment must be present with the right shape.
    pub fn load_state(&mut self, t: u64, mut lookup: impl FnMut(&str) -> Result<Tensor>) -> Result<()> {
        for (i, n) in self.names.iter().enumerate() {
            for (slot, kind) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let loaded = lookup(&format!("adam.{kind}.{n}"))?;
                if loaded.dims() != slot.dims() {
                    return Err(Error::validation(format!(
                        "optimizer state for '{n}' has shape {:?}, expected {:?}",
                        loaded.dims(),
                        slot.dims()
                    )));
                }
                *slot = loaded;
            }
        }
        self.t = t;
        Ok(())
    }
}
