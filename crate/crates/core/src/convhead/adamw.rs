use super::{HeadGrads, HeadParams};
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    /// Zeroed moments for `n` parameters with the default betas and eps.
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One update:
/// `theta -= lr * wd * theta`, then `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(p: &mut HeadParams, grads: &HeadGrads, s: &mut AdamWState) -> Result<()> {
    let n = p.num_params();
    if grads.num_params() != n || s.m.len() != n || s.v.len() != n {
        return Err(Error::config("AdamW: parameter, gradient and moment sizes differ"));
    }
    s.step += 1;
    let bc1 = 1.0 - s.beta1.powi(s.step as i32);
    let bc2 = 1.0 - s.beta2.powi(s.step as i32);
    for (((theta, g), m), v) in p.params_mut().zip(grads.params()).zip(&mut s.m).zip(&mut s.v) {
        *theta -= s.lr * s.weight_decay * *theta;
        *m = s.beta1 * *m + (1.0 - s.beta1) * g;
        *v = s.beta2 * *v + (1.0 - s.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *theta -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
    }
    Ok(())
}
