//! Adam with bias correction. The optimizer updates exactly the parameters
//! named in the gradient map; frozen parameters are rejected, absent ones
//! (e.g. an unused branch) keep their values and moments untouched.

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!("bad learning rate {lr}")));
    }
    // Validate the whole step before mutating anything.
    for (name, g) in grads {
        let Some(p) = params.get(name) else {
            return Err(Error::Shape(format!("gradient for unknown parameter {name}")));
        };
        if params.is_frozen(name) {
            return Err(Error::Contract(format!(
                "gradient supplied for frozen parameter {name}"
            )));
        }
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} vs parameter {:?} for {name}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, g) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.tensor_mut(name).expect("validated above");
        let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
        for ((pi, mi), (vi, gi)) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut().iter_mut().zip(g.data()))
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
