use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{NumericsError, Result};
use crate::params::{Gradients, ParameterStore};
use crate::tensor::Tensor;

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    steps: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter in `store`.
    ///
    /// `theta <- theta - lr * wd * theta - lr * m_hat / (sqrt(v_hat) + eps)`
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &Gradients,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let names: Vec<String> = store.trainable_names().map(str::to_string).collect();
        for name in &names {
            let g = grads
                .get(name)
                .ok_or_else(|| NumericsError::MissingGradient(name.clone()))?;
            let shape = store.get(name)?.shape();
            if g.shape() != shape {
                return Err(NumericsError::shape(
                    "adamw_step",
                    format!("{name} {shape:?}"),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for name in &names {
            let g = grads.get(name).expect("checked above");
            let param = store.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for (((p, &gi), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * weight_decay * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.bump_step();
        Ok(())
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, v) in &self.first {
            out.push((format!("m/{k}"), v.clone()));
        }
        for (k, v) in &self.second {
            out.push((format!("v/{k}"), v.clone()));
        }
        out
    }

    pub fn restore(steps: u64, state: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut opt = AdamW {
            steps,
            ..AdamW::default()
        };
        for (name, t) in state {
            if let Some(rest) = name.strip_prefix("m/") {
                opt.first.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("v/") {
                opt.second.insert(rest.to_string(), t);
            } else {
                return Err(NumericsError::Checkpoint(format!(
                    "unexpected optimizer entry `{name}`"
                )));
            }
        }
        Ok(opt)
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(NumericsError::invalid(
            "cosine_lr",
            format!("step {step} outside [0, {total_steps}]"),
        ));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}
