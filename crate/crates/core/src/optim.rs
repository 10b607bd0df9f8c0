use serde::{Deserialize, Serialize};

use crate::model::Param;
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl SgdConfig {
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// SGD with (optionally Nesterov) momentum:
/// `buf ← μ·buf + g`, `p ← p − lr·(g + μ·buf)` for Nesterov, `p ← p − lr·buf` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    config: SgdConfig,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(config: SgdConfig, n_params: usize) -> Self {
        Sgd {
            config,
            buffers: vec![None; n_params],
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Applies one update. `grads[i] == None` leaves parameter `i` frozen.
    pub fn step(&mut self, params: &mut [Param], grads: &[Option<Array>], lr: f64) {
        let mu = self.config.momentum;
        let wd = self.config.weight_decay;
        for ((param, grad), buf) in params.iter_mut().zip(grads).zip(self.buffers.iter_mut()) {
            let Some(grad) = grad else { continue };
            let p = param.value.data_mut();
            let buf = buf.get_or_insert_with(|| vec![0.0; p.len()]);
            for ((pv, &gv), bv) in p.iter_mut().zip(grad.data()).zip(buf.iter_mut()) {
                let g = gv + wd * *pv;
                *bv = mu * *bv + g;
                let update = if self.config.nesterov {
                    g + mu * *bv
                } else {
                    *bv
                };
                *pv -= lr * update;
            }
        }
    }
}
