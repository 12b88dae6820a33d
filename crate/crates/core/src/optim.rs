//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::{Param, ParamStore};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    /// First-moment decay; the "momentum" of the optimiser.
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for every parameter of a store plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update over all parameters.
///
/// Decoupled weight decay shrinks `p <- p - lr * wd * p` before the
/// bias-corrected moment update, and only for parameters flagged `decay`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: Scalar,
    weight_decay: Scalar,
) -> Result<(), TensorError> {
    adam_step_where(store, grads, state, cfg, lr, weight_decay, |_| true)
}

/// [`adam_step`] restricted to parameters accepted by `trainable`; the others
/// keep their values and moments.
pub fn adam_step_where(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: Scalar,
    weight_decay: Scalar,
    trainable: impl Fn(&Param) -> bool,
) -> Result<(), TensorError> {
    if grads.len() != store.len() || state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(TensorError::Invalid {
            op: "adam_step",
            msg: format!(
                "{} params, {} grads, {} moment buffers",
                store.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for ((p, g), (m, v)) in store.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        for other in [g.shape(), m.shape(), v.shape()] {
            if other != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: other.to_vec(),
                });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in store
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if !trainable(p) {
            continue;
        }
        let shrink = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
        let pd = p.value.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            let mi = &mut m.data_mut()[i];
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m.data()[i] / bc1;
            let vhat = v.data()[i] / bc2;
            pd[i] = pd[i] * shrink - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
