//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The tape is rebuilt for every training step: operations append nodes as
//! they are evaluated and [`Tape::backward`] walks them in reverse.

mod tape;
mod tensor;

pub(crate) use tape::matmul_into;
pub use tape::{composite_ray, Gradients, Stencil, Tape, Var};
pub use tensor::Tensor;

/// Anything that owns trainable tensors, in a fixed order.
pub trait Module<T: crate::real::Real> {
    fn parameters(&self) -> Vec<&Tensor<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }
}
