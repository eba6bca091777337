use crate::error::{Error, Result};
use crate::model::{decays, ModelParams};
use crate::tensor::{Scalar, Tensor};

use super::TrainConfig;

/// AdamW moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Global L2 norm accumulated in f64.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients to norm `max_norm` when above it; returns the
/// pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One bias-corrected AdamW update with decoupled weight decay. Checks every
/// gradient before touching any state, so a non-finite gradient leaves
/// parameters and moments unchanged.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    opt: &mut OptimizerState<T>,
    lr: f64,
    tc: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.tensors().len() || opt.m.len() != grads.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} parameters, {} gradients, {} moments",
            params.tensors().len(),
            grads.len(),
            opt.m.len()
        )));
    }
    for (name, (p, g)) in params.names().iter().zip(params.tensors().iter().zip(grads)) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGrad(name.clone()));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (T::of(tc.beta1), T::of(tc.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::of(1.0 - tc.beta1.powi(t));
    let bc2 = T::of(1.0 - tc.beta2.powi(t));
    let lr_t = T::of(lr);
    let eps = T::of(tc.eps_adam);
    let names = params.names().to_vec();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let decay = if decays(&names[i]) { T::of(lr * tc.weight_decay) } else { T::zero() };
        let (m, v) = (opt.m[i].data_mut(), opt.v[i].data_mut());
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *x -= decay * *x;
            *x -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
