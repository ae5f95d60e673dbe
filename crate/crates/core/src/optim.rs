//! Adam with per-group learning rates.

use crate::autodiff::Tensor;
use crate::error::{shape_err, Result};
use crate::real::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub step: u64,
    pub slots: Vec<AdamSlot<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            step: 0,
            slots: sizes.iter().map(|&n| AdamSlot { m: vec![T::zero(); n], v: vec![T::zero(); n] }).collect(),
        }
    }

    /// One bias-corrected update. `lrs[i]` is the learning rate of `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]], lrs: &[f64]) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(shape_err(
                "adam",
                format!(
                    "{} params, {} grads, {} rates, {} slots",
                    params.len(),
                    grads.len(),
                    lrs.len(),
                    self.slots.len()
                ),
            ));
        }
        for ((p, g), slot) in params.iter().zip(grads).zip(&self.slots) {
            if p.numel() != g.len() || slot.m.len() != g.len() {
                return Err(shape_err("adam", format!("parameter of {} with gradient of {}", p.numel(), g.len())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let bc1 = T::of(1.0 - BETA1.powi(t));
        let bc2 = T::of(1.0 - BETA2.powi(t));
        let eps = T::of(EPSILON);
        for (((p, g), slot), &lr) in params.iter_mut().zip(grads).zip(self.slots.iter_mut()).zip(lrs) {
            let lr = T::of(lr);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(*g).zip(slot.m.iter_mut()).zip(slot.v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
