//! ADAM with the standard bias-corrected moment recurrence.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::networks::{GroupGrads, ParamGroup};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments for one parameter group, plus its update count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(group: &ParamGroup) -> Self {
        let zeros: Vec<Vec<f64>> = group.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    /// Whether the moment arrays line up with `group`.
    pub fn matches(&self, group: &ParamGroup) -> bool {
        self.m.len() == group.params.len()
            && self.v.len() == group.params.len()
            && group
                .params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.tensor.len() && v.len() == p.tensor.len())
    }

    pub fn step(&mut self, group: &mut ParamGroup, grads: &GroupGrads, cfg: &AdamConfig) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        for (((p, g), m), v) in group.params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= cfg.learning_rate * m_hat / (math::sqrt(v_hat) + cfg.eps);
            }
        }
    }
}
