use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_params(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Adam {
            config,
            state: AdamState::for_params(store),
        }
    }

    /// Apply one update using the gradients currently held in `store`.
    ///
    /// The step is all-or-nothing: if any gradient is non-finite, no
    /// parameter changes and the error names the offending parameter.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.state.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, model has {}",
                self.state.m.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if !p.grad.is_finite() {
                return Err(Error::numeric(
                    format!("parameter {}", p.name),
                    "gradient is not finite; step rejected",
                ));
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in store
            .iter_mut()
            .zip(self.state.m.iter_mut())
            .zip(self.state.v.iter_mut())
        {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((w, &g), m), v) in value
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                if weight_decay != 0.0 {
                    *w -= lr * weight_decay * *w;
                }
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
