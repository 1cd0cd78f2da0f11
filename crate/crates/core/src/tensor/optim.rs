use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        OptimState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay. Consumes (clears)
/// every parameter's gradient.
pub fn adam_step(params: &mut [Tensor], state: &mut OptimState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::contract("optimizer state does not match parameter list"));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::contract(format!("parameter {i} has no gradient")));
        }
        if state.m[i].len() != p.len() {
            return Err(Error::contract(format!("moment buffer {i} has wrong size")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad().unwrap().to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for k in 0..data.len() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            data[k] -= state.lr * (mhat / (vhat.sqrt() + state.eps) + state.weight_decay * data[k]);
        }
        p.zero_grad();
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub cycle_epochs: usize,
}

/// Linear warmup `base·(e+1)/w` for `e < w`, then cosine annealing
/// `min + (base-min)(1+cos(π k/cycle))/2` with `k = e - w`.
pub fn lr_at(s: &LrSchedule, epoch: usize) -> f64 {
    if epoch < s.warmup_epochs {
        let lr = s.base_lr * (epoch + 1) as f64 / s.warmup_epochs as f64;
        return lr.max(s.min_lr);
    }
    if s.cycle_epochs == 0 {
        return s.base_lr;
    }
    let k = (epoch - s.warmup_epochs) as f64;
    let c = (std::f64::consts::PI * k / s.cycle_epochs as f64).cos();
    s.min_lr + (s.base_lr - s.min_lr) * (1.0 + c) / 2.0
}
