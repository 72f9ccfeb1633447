use std::collections::BTreeMap;

use crate::tensor::{ParameterStore, Result, TensorError};

/// Adam with bias correction and a fixed learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in the store. Fails without
    /// touching anything if a gradient is absent.
    pub fn step(&mut self, params: &mut ParameterStore) -> Result<()> {
        for (name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(TensorError::MissingGrad(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(TensorError::Dimension(format!(
                    "optimizer state for `{name}` has {} entries, parameter has {n}",
                    m.len()
                )));
            }
            let grad = p.grad().expect("checked above").to_vec();
            let values = p.values_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
