use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numcore::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Sgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Ramps linearly up to lr over `warmup_steps`, then decays linearly to
    /// zero at the final step.
    LinearWarmup,
}

impl Schedule {
    /// Learning rate for zero-based `step` of `total` steps.
    pub fn lr(self, base: f64, step: usize, warmup_steps: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::LinearWarmup if step < warmup_steps => base * (step + 1) as f64 / warmup_steps as f64,
            Schedule::LinearWarmup => {
                let decay = total.saturating_sub(warmup_steps).max(1);
                base * (total.saturating_sub(step) as f64 / decay as f64).min(1.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerHyper {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub hyper: OptimizerHyper,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl Optimizer {
    pub fn new(hyper: OptimizerHyper) -> Self {
        Self {
            hyper,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that has a gradient. Parameters
    /// with `requires_grad == false` are never read or written.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - h.beta1.powi(t), 1.0 - h.beta2.powi(t));
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            match h.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.data_mut().iter_mut().zip(&g) {
                        *w -= lr * (g + h.weight_decay * *w);
                    }
                }
                OptimizerKind::Adamw => {
                    let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        st.m[i] = h.beta1 * st.m[i] + (1.0 - h.beta1) * g[i];
                        st.v[i] = h.beta2 * st.v[i] + (1.0 - h.beta2) * g[i] * g[i];
                        let m_hat = st.m[i] / bc1;
                        let v_hat = st.v[i] / bc2;
                        *w -= lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * *w);
                    }
                }
            }
        }
    }
}
