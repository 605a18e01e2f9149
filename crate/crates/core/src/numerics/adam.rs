use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Moment accumulators for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<R> {
    pub m: Tensor<R>,
    pub v: Tensor<R>,
    pub step: u64,
}

impl<R: Real> AdamSlot<R> {
    pub fn for_param(param: &Tensor<R>) -> Self {
        Self {
            m: Tensor::zeros_like(param),
            v: Tensor::zeros_like(param),
            step: 0,
        }
    }
}

/// Adam hyperparameters plus one slot per registered parameter.
///
/// Slots keep their own step counters so parameters that sit out an update
/// (per-sequence variational parameters outside the current batch) are
/// bias-corrected by the number of updates they actually received.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: Vec<AdamSlot<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: Vec::new(),
        }
    }

    /// Allocates zeroed slots matching `params`.
    pub fn register(&mut self, params: &[&Tensor<R>]) {
        self.slots = params.iter().map(|p| AdamSlot::for_param(p)).collect();
    }

    /// Bias-corrected Adam update of one parameter (gradient descent).
    pub fn update(&mut self, slot: usize, param: &mut Tensor<R>, grad: &Tensor<R>) -> Result<()> {
        let (lr, b1, b2, eps) = (R::lit(self.lr), R::lit(self.beta1), R::lit(self.beta2), R::lit(self.eps));
        let s = self
            .slots
            .get_mut(slot)
            .ok_or_else(|| Error::InvalidArgument(format!("no Adam slot {slot}")))?;
        param.same_shape(grad, "adam_step")?;
        param.same_shape(&s.m, "adam_step")?;
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient for Adam slot {slot}")));
        }
        s.step += 1;
        let t = s.step as i32;
        let c1 = R::one() - b1.powi(t);
        let c2 = R::one() - b2.powi(t);
        let (m, v) = (s.m.data_mut(), s.v.data_mut());
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = b1 * m[i] + (R::one() - b1) * g;
            v[i] = b2 * v[i] + (R::one() - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Applies one Adam update to every parameter, slot `i` for `params[i]`.
pub fn adam_step<R: Real>(params: &mut [&mut Tensor<R>], grads: &[Tensor<R>], state: &mut AdamState<R>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} params, {} grads, {} slots",
            params.len(),
            grads.len(),
            state.slots.len()
        )));
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(i, p, g)?;
    }
    Ok(())
}
