//! Adam with bias correction.

use super::ParamSet;
use crate::{Error, Result};

/// Per-parameter first/second moment buffers plus the shared step count.
///
/// The moment buffers are aligned with the [`ParamSet`] by position, so the
/// same state must always be used with the same parameter set.
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.tensors().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.tensors().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter from its accumulated gradient.
    /// Increments the step count exactly once; parameters without an
    /// accumulated gradient are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                msg: format!("state for {} parameters, set has {}", self.m.len(), params.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let n = self.m[i].len();
            if tensor.numel() != n {
                return Err(Error::Shape {
                    op: "adam_step",
                    msg: format!("parameter {i} has {} values, state has {n}", tensor.numel()),
                });
            }
            let (b1, b2) = (self.beta1, self.beta2);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match tensor.grad() {
                Some(g) => {
                    for j in 0..n {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    }
                }
                None => {
                    for j in 0..n {
                        m[j] *= b1;
                        v[j] *= b2;
                    }
                }
            }
            let data = tensor.data_mut();
            for j in 0..n {
                data[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
