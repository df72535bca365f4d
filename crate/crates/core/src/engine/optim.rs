use serde::{Deserialize, Serialize};

use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
        }
    }
}

/// Moment estimates for one group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, store: &ParamStore, params: &[ParamId]) -> Self {
        let zeros = |id: &ParamId| vec![0.0; store.get(*id).numel()];
        Self {
            config,
            params: params.to_vec(),
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One decoupled-weight-decay Adam update of every parameter in the group:
    /// `w ← w − lr·(m̂/(√v̂+ε) + wd·w)`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for id in &self.params {
            if store.get(*id).grad().is_none() {
                return Err(Error::contract(format!(
                    "adamw step on parameter '{}' without a gradient",
                    store.name(*id)
                )));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (slot, id) in self.params.iter().enumerate() {
            let t = store.get_mut(*id);
            let g = t.grad().expect("checked above").to_vec();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of the gradients of `params` (missing gradients count as 0).
pub fn global_grad_norm(store: &ParamStore, params: &[ParamId]) -> f64 {
    params
        .iter()
        .filter_map(|id| store.get(*id).grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_grad_global_norm(store: &mut ParamStore, params: &[ParamId], max_norm: f64) -> f64 {
    let norm = global_grad_norm(store, params);
    if norm > max_norm {
        let k = max_norm / norm;
        for id in params {
            if let Some(g) = store.get_mut(*id).grad_mut() {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
    }
    norm
}
