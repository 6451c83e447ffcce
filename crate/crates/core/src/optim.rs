//! First-order optimizers over flat parameter views and the cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tape::Mat;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Applies one update to `tensors` (flattened in order) with gradient `grad`.
    pub fn step(&mut self, tensors: &mut [Mat], grad: &[f64], lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::InvalidArgument(format!("negative learning rate {lr}")));
        }
        check_finite(grad)?;
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut offset = 0;
        for tensor in tensors.iter_mut() {
            for theta in tensor.iter_mut() {
                let g = grad[offset];
                let m = &mut self.m[offset];
                let v = &mut self.v[offset];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *theta);
                offset += 1;
            }
        }
        Ok(())
    }
}

/// Adagrad: per-coordinate step scaled by the root of accumulated squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Adagrad {
    pub eps: f64,
    pub accum: Vec<f64>,
}

impl Adagrad {
    pub fn new(len: usize) -> Self {
        Self {
            eps: 1e-10,
            accum: vec![0.0; len],
        }
    }

    pub fn step(&mut self, tensors: &mut [Mat], grad: &[f64], lr: f64) -> Result<()> {
        check_finite(grad)?;
        let mut offset = 0;
        for tensor in tensors.iter_mut() {
            for theta in tensor.iter_mut() {
                let g = grad[offset];
                self.accum[offset] += g * g;
                *theta -= lr * g / (self.accum[offset].sqrt() + self.eps);
                offset += 1;
            }
        }
        Ok(())
    }
}

fn check_finite(grad: &[f64]) -> Result<()> {
    match grad.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!(
            "gradient coordinate {i} is {}",
            grad[i]
        ))),
        None => Ok(()),
    }
}

/// `lr_max · (1 + cos(π · step / total)) / 2`, clamped to the schedule's range.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    lr_max * (1.0 + (PI * progress).cos()) / 2.0
}
