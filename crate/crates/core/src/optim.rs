//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{MvftError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of completed steps.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Zeroed moments for every parameter in `params`.
    pub fn for_params(lr: f64, params: &ParamStore) -> Self {
        let mut state = Self::new(lr);
        for (name, t) in params.iter() {
            state.m.insert(name.clone(), Tensor::zeros(t.shape()));
            state.v.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        state
    }
}

/// One Adam update over every parameter in `params`.
///
/// Every parameter must have a gradient of matching shape; moments are
/// created lazily for parameters the state has not seen.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| MvftError::contract(format!("missing gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(MvftError::shape("adam_step", p.shape(), g.shape()));
        }
        for moments in [&state.m, &state.v] {
            if let Some(mo) = moments.get(name) {
                if mo.shape() != p.shape() {
                    return Err(MvftError::shape("adam_step", p.shape(), mo.shape()));
                }
            }
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);

    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
