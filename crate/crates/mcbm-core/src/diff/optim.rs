//! SGD with momentum and Adam, plus a step learning-rate scheduler.

use serde::{Deserialize, Serialize};

use crate::diff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum,
            ..OptimizerConfig::default()
        }
    }

    pub fn adam(learning_rate: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            ..OptimizerConfig::default()
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.0,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Per-parameter moment buffers. SGD uses only `m` (the momentum buffer).
#[derive(Clone, Debug, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    moments: Vec<Moments>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> OptimizerState {
        let moments = store
            .ids()
            .map(|id| {
                let n = store.tensor(id).len();
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        OptimizerState {
            config,
            moments,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self, id: ParamId) -> &Moments {
        &self.moments[id.0]
    }

    /// Restores moment buffers (checkpoint load). Shapes must match.
    pub fn restore_moments(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        let n = self.moments[id.0].m.len();
        if m.len() != n || v.len() != n {
            return Err(Error::dim(format!(
                "moment buffers have {} / {} values, parameter has {}",
                m.len(),
                v.len(),
                n
            )));
        }
        self.moments[id.0] = Moments { m, v };
        Ok(())
    }

    pub fn set_step_count(&mut self, n: u64) {
        self.step_count = n;
    }

    /// One update pass over every parameter at the given learning rate.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step_count += 1;
        let c = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.tensor_mut(id);
            let n = t.len();
            // Split borrows: read grad, mutate values and moments in lockstep.
            let grads: Vec<f64> = t.grad().expect("parameter has grad").to_vec();
            let mom = &mut self.moments[id.0];
            match c.kind {
                OptimizerKind::Sgd => {
                    for i in 0..n {
                        let g = grads[i] + c.weight_decay * t.values()[i];
                        mom.m[i] = c.momentum * mom.m[i] + g;
                        t.values_mut()[i] -= lr * mom.m[i];
                    }
                }
                OptimizerKind::Adam => {
                    let t1 = 1.0 - c.adam_beta1.powi(self.step_count as i32);
                    let t2 = 1.0 - c.adam_beta2.powi(self.step_count as i32);
                    for i in 0..n {
                        let g = grads[i] + c.weight_decay * t.values()[i];
                        mom.m[i] = c.adam_beta1 * mom.m[i] + (1.0 - c.adam_beta1) * g;
                        mom.v[i] = c.adam_beta2 * mom.v[i] + (1.0 - c.adam_beta2) * g * g;
                        let mhat = mom.m[i] / t1;
                        let vhat = mom.v[i] / t2;
                        t.values_mut()[i] -= lr * mhat / (vhat.sqrt() + c.adam_eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepScheduler {
    pub step_size_epochs: usize,
    pub decay_factor: f64,
}

impl StepScheduler {
    pub fn new(step_size_epochs: usize, decay_factor: f64) -> Result<StepScheduler> {
        if step_size_epochs == 0 {
            return Err(Error::config("scheduler step size must be positive"));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(Error::config(format!(
                "decay factor {} outside (0, 1]",
                decay_factor
            )));
        }
        Ok(StepScheduler {
            step_size_epochs,
            decay_factor,
        })
    }

    /// Learning rate for a zero-based epoch index.
    pub fn lr_at(&self, base_lr: f64, epoch: usize) -> f64 {
        base_lr * self.decay_factor.powi((epoch / self.step_size_epochs) as i32)
    }
}
