//! Adaptive-moment optimisation with decoupled weight decay.

use crate::error::{Error, Result};
use crate::ndgrad::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moments plus the number of updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

impl AdamW {
    /// One bias-corrected update:
    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&self, params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::Contract("optimizer state does not cover the parameter set".into()));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = (1.0 - (self.beta1 as f64).powi(t)) as f32;
        let bc2 = (1.0 - (self.beta2 as f64).powi(t)) as f32;
        let iter = params.iter_mut().zip(grads.iter()).zip(state.m.iter_mut().zip(state.v.iter_mut()));
        for (((name, p), (gname, g)), ((_, m), (_, v))) in iter {
            if name != gname || p.shape() != g.shape() {
                return Err(Error::Contract(format!("gradient {gname} does not match parameter {name}")));
            }
            let pd = p.data_mut();
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *pi);
            }
        }
        Ok(())
    }
}
