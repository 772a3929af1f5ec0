use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(numel: usize) -> Self {
        Self { m: vec![T::zero(); numel], v: vec![T::zero(); numel], t: 0 }
    }
}

/// One bias-corrected Adam update in place. A non-finite gradient aborts before
/// anything changes, naming `path`.
pub fn adam_step<T: Scalar>(
    path: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.numel() {
        return Err(Error::Shape { op: "adam_step", lhs: param.shape().to_vec(), rhs: grad.shape().to_vec() });
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite { path: path.to_string() });
    }
    state.t += 1;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let c1 = T::one() - b1.powi(state.t as i32);
    let c2 = T::one() - b2.powi(state.t as i32);
    let (lr, eps) = (T::lit(lr), T::lit(hyper.eps));
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `lr₀ · (lr_end / lr₀)^(step / total)`.
pub fn exponential_decay(lr0: f64, lr_end: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (lr_end / lr0).powf(step as f64 / total as f64)
}
