//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Real> AdamHyper<S> {
    /// Standard moments (0.9, 0.999) and eps 1e-8.
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr: S::of(lr),
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            eps: S::of(1e-8),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub t: u64,
    pub hyper: AdamHyper<S>,
}

impl<S: Real> AdamState<S> {
    pub fn new(len: usize, hyper: AdamHyper<S>) -> Self {
        AdamState {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            t: 0,
            hyper,
        }
    }
}

/// One Adam update. Inputs are left untouched; the new state and parameters
/// are returned.
pub fn adam_step<S: Real>(
    state: &AdamState<S>,
    params: &ParamVector<S>,
    grad: &[S],
) -> Result<(AdamState<S>, ParamVector<S>)> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, state of {}",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "gradient".into(),
            index,
        });
    }
    let AdamHyper { lr, beta1, beta2, eps } = state.hyper;
    let t = state.t + 1;
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = S::one() - beta1.powi(exp);
    let c2 = S::one() - beta2.powi(exp);

    let mut m = Vec::with_capacity(grad.len());
    let mut v = Vec::with_capacity(grad.len());
    let mut values = Vec::with_capacity(grad.len());
    for (i, &g) in grad.iter().enumerate() {
        let mi = beta1 * state.m[i] + (S::one() - beta1) * g;
        let vi = beta2 * state.v[i] + (S::one() - beta2) * g * g;
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        values.push(params.values()[i] - lr * m_hat / (v_hat.sqrt() + eps));
        m.push(mi);
        v.push(vi);
    }
    let next = params.with_values(values)?;
    next.ensure_finite("parameters after adam step")?;
    Ok((
        AdamState {
            m,
            v,
            t,
            hyper: state.hyper,
        },
        next,
    ))
}
