//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::ParamId;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A parameter handed to [`Adam::step`].
pub struct ParamMut<'a> {
    pub id: ParamId,
    pub name: String,
    pub tensor: &'a mut Tensor,
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. A parameter without an entry in `grads` is treated
    /// as having zero gradient. Nothing is modified if any gradient is
    /// non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [ParamMut<'_>], grads: &BTreeMap<ParamId, Tensor>) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = grads.get(&p.id) {
                if g.shape() != p.tensor.shape() {
                    return Err(Error::shape(
                        "adam",
                        format!(
                            "gradient for {} is {:?}, parameter is {:?}",
                            p.name,
                            g.shape(),
                            p.tensor.shape()
                        ),
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in params.iter_mut() {
            let Some(g) = grads.get(&p.id) else {
                // m and v decay toward zero with no gradient; with fresh state
                // they stay zero and the update vanishes.
                if let Some((m, v)) = self.moments.get_mut(&p.id) {
                    m.iter_mut().for_each(|x| *x *= beta1);
                    v.iter_mut().for_each(|x| *x *= beta2);
                    for ((w, m), v) in p.tensor.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
                        *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    }
                }
                continue;
            };
            let len = p.tensor.len();
            let (m, v) = self
                .moments
                .entry(p.id)
                .or_insert_with(|| (vec![0.0; len], vec![0.0; len]));
            for (((w, &g), m), v) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
