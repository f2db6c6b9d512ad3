//! Adam optimizer over a flat parameter vector. One step per training epoch
//! by design; the moment estimates carry the averaging across epochs that
//! the sequential measure update relies on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub hp: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize, hp: AdamParams) -> Self {
        AdamState {
            hp,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected step: theta -= lr * m_hat / (sqrt(v_hat) + eps).
    /// Rejects non-finite gradients before touching any state, so a failed
    /// call leaves parameters and moments bit-identical.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grad.len().max(params.len()),
            });
        }
        if let Some(g) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite gradient component {g}"
            )));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be finite and nonnegative, got {lr}"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.hp.beta1, self.hp.beta2, self.hp.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
