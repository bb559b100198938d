use indexmap::IndexMap;

use crate::checkpoint::AdamState;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Global L2 norm over all gradients.
pub fn grad_norm<T: Scalar>(grads: &IndexMap<String, Vec<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut IndexMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads
            .values_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|x| *x = *x * s);
    }
    norm
}

/// One AdamW update with decoupled weight decay and bias-corrected
/// moments. Parameters without a gradient entry are left untouched.
///
/// Nothing is modified if any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    opt: &AdamW,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if g.len() != p.numel() {
            return Err(Error::Contract(format!(
                "gradient for {name} has {} entries, parameter has {}",
                g.len(),
                p.numel()
            )));
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name}[{i}] is {} at step {}",
                g[i],
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of(opt.beta1);
    let b2 = T::of(opt.beta2);
    let one = T::one();
    let bc1 = T::of(1.0 - opt.beta1.powi(t));
    let bc2 = T::of(1.0 - opt.beta2.powi(t));
    let lr = T::of(opt.lr);
    let decay = T::of(1.0 - opt.lr * opt.weight_decay);
    let eps = T::of(opt.eps);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] = p.data[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
