//! SGD with momentum and coupled weight decay, and the cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{Element, Tensor};

/// `lr₀ · ½ · (1 + cos(π t / T))`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("cosine schedule needs a positive step count"));
    }
    if step > total {
        return Err(Error::contract(format!(
            "step {step} is past the schedule end {total}"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos()))
}

/// One momentum buffer per trainable parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T: Element = f32> {
    pub velocity: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Element> SgdState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let velocity = store
            .iter()
            .filter(|(_, _, e)| e.kind != ParamKind::Buffer)
            .map(|(id, _, e)| (id, Tensor::zeros(e.tensor.shape())))
            .collect();
        SgdState { velocity }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`; decay is skipped for
/// [`ParamKind::NoDecay`] entries.
pub fn sgd_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut SgdState<T>,
    lr: f64,
    cfg: SgdConfig,
) -> Result<()> {
    if grads.len() != state.velocity.len() {
        return Err(Error::contract(format!(
            "{} gradients for {} momentum buffers",
            grads.len(),
            state.velocity.len()
        )));
    }
    let (mu, lr) = (T::of(cfg.momentum), T::of(lr));
    for ((gid, g), (vid, v)) in grads.iter().zip(state.velocity.iter_mut()) {
        let theta_shape = store.tensor(*vid).shape().to_vec();
        if gid != vid || g.shape() != theta_shape.as_slice() || v.shape() != theta_shape.as_slice()
        {
            return Err(Error::contract(format!(
                "gradient for {:?} has shape {:?}, parameter is {theta_shape:?}",
                store.name(*vid),
                g.shape()
            )));
        }
        let wd = match store.kind(*vid) {
            ParamKind::Weight => T::of(cfg.weight_decay),
            _ => T::zero(),
        };
        let theta = store.tensor_mut(*vid).data_mut();
        for ((t, &gi), vi) in theta.iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + (gi + wd * *t);
            *t -= lr * *vi;
        }
    }
    Ok(())
}
