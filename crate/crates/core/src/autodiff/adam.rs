use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} state buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
            return Err(Error::Shape(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gr;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gr * gr;
            *w -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let grads = vec![Tensor::new(vec![3], vec![0.3, -4.0, 1e-3]).unwrap()];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g| + eps)
        let expect =
            [1.0 - 1e-3 * 0.3 / (0.3 + 1e-8), -2.0 + 1e-3 * 4.0 / (4.0 + 1e-8), 0.5 - 1e-3 * 1e-3 / (1e-3 + 1e-8)];
        for (a, b) in params[0].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_state() {
        let mut params = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let grads = vec![Tensor::zeros(vec![2])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params[0].data(), &[1.0, 2.0]);
        assert_eq!(state.v[0], vec![0.0, 0.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn mismatched_shapes() {
        let mut params = vec![Tensor::zeros(vec![2])];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).is_err());
        assert_eq!(state.step, 0);
    }
}
