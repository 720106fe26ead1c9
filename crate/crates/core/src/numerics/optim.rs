use serde::{Deserialize, Serialize};

use super::array::DenseArray;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub first: Vec<DenseArray>,
    pub second: Vec<DenseArray>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &[DenseArray]) -> Self {
        let zeros: Vec<DenseArray> = params.iter().map(|p| DenseArray::zeros(p.shape())).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction.
pub fn adamw_step(
    params: &mut [DenseArray],
    grads: &[&DenseArray],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Contract(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((p, g), (m, v)) in params
        .iter()
        .zip(grads)
        .zip(state.first.iter().zip(&state.second))
    {
        p.ensure_same_shape(g, "adamw gradient")?;
        p.ensure_same_shape(m, "adamw first moment")?;
        p.ensure_same_shape(v, "adamw second moment")?;
    }

    state.step += 1;
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        weight_decay,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - f64::from(beta1).powi(t);
    let c2 = 1.0 - f64::from(beta2).powi(t);
    let decay = 1.0 - lr * weight_decay;

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        let it = p
            .values_mut()
            .iter_mut()
            .zip(g.values())
            .zip(m.values_mut().iter_mut().zip(v.values_mut()));
        for ((pv, &gv), (mv, vv)) in it {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = f64::from(*mv) / c1;
            let v_hat = f64::from(*vv) / c2;
            let update = f64::from(lr) * m_hat / (v_hat.sqrt() + f64::from(eps));
            *pv = (f64::from(*pv * decay) - update) as f32;
        }
    }
    Ok(())
}

/// Exponential moving average of the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f32,
    pub shadow: Vec<DenseArray>,
}

impl EmaState {
    pub fn new(decay: f32, params: &[DenseArray]) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("ema decay must lie in (0, 1), got {decay}")));
        }
        Ok(Self {
            decay,
            shadow: params.to_vec(),
        })
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(ema: &mut EmaState, params: &[DenseArray]) -> Result<()> {
    if ema.shadow.len() != params.len() {
        return Err(Error::Contract(format!(
            "ema tracks {} arrays, got {}",
            ema.shadow.len(),
            params.len()
        )));
    }
    for (s, p) in ema.shadow.iter().zip(params) {
        s.ensure_same_shape(p, "ema parameter")?;
    }
    let d = ema.decay;
    for (s, p) in ema.shadow.iter_mut().zip(params) {
        for (sv, &pv) in s.values_mut().iter_mut().zip(p.values()) {
            // same as d·s + (1 − d)·p, but exact when s == p
            *sv += (1.0 - d) * (pv - *sv);
        }
    }
    Ok(())
}
