//! First-order optimizers over sets of [`Tensor`] parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Every parameter must carry a gradient.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam state tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        match p.grad() {
            None => return Err(Error::Contract(format!("parameter {i} has no gradient"))),
            Some(g) if g.len() != state.m[i].len() => {
                return Err(Error::dim("adam_step", format!("parameter {i} changed size")))
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.take_grad().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.ensure_finite("adam_step")?;
    }
    Ok(())
}

/// Plain SGD with heavy-ball momentum: `v ← μ v + g`, `x ← x − lr v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &[&Tensor], lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::Contract("parameter count changed between SGD steps".into()));
        }
        for (i, p) in params.iter_mut().enumerate() {
            let g = p
                .take_grad()
                .ok_or_else(|| Error::Contract(format!("parameter {i} has no gradient")))?;
            let vel = &mut self.velocity[i];
            for ((x, gi), vi) in p.data_mut().iter_mut().zip(g).zip(vel.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *x -= self.lr * *vi;
            }
            p.ensure_finite("sgd_step")?;
        }
        Ok(())
    }
}
