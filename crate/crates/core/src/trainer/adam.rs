use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Returns fresh parameter leaves.
pub fn adam_step(params: &[Tensor], grads: &[Vec<f64>], state: &mut AdamState, hyper: &AdamConfig) -> Result<Vec<Tensor>> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam", format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len())));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].len() != p.numel() || state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
            return Err(Error::shape("adam", format!("parameter {i} disagrees with its gradient or moments")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let mut out = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut data = p.to_vec();
        for j in 0..data.len() {
            let g = grads[i][j];
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g * g;
            data[j] -= hyper.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hyper.eps);
        }
        out.push(Tensor::parameter(p.shape(), data)?);
    }
    Ok(out)
}
