use std::f64::consts::PI;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moments for an ordered list of parameters, plus the shared
/// step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamWState {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        AdamWState {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update:
/// `p ← p − lr·(m̂/(√v̂ + ε) + weight_decay·p)`.
///
/// A non-finite gradient refuses the whole step and leaves parameters and
/// state untouched.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamWState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "param {i}: value {:?}, grad {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    state.m[i].shape()
                ),
            ));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter {i} at element {j}; step refused"
            )));
        }
    }
    let c = state.config;
    state.t += 1;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, pv) in p.data_mut().iter_mut().enumerate() {
            let gv = g.data()[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gv;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gv * gv;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *pv -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *pv);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr` over `warmup_steps`, then half-cosine decay to
/// zero at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, warmup_steps: u64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine_lr: total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "cosine_lr: step {step} beyond total {total_steps}"
        )));
    }
    let warmup = warmup_steps.min(total_steps);
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    if warmup == total_steps {
        return Ok(base_lr);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}
