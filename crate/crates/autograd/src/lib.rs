//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every value on a [`Tape`] is an `ndarray::Array2`. The op set is small and
//! shaped around transformer-style models: matrix products, broadcast masks,
//! layer normalization, a fused masked multi-head attention, element gathers
//! (for patchify / im2col / row selection) and a few loss primitives.

pub mod check;
mod scalar;
mod tape;

pub use scalar::{gelu, gelu_grad, sigmoid, softplus, Scalar};
pub use tape::{Grads, Tape, Var, PAD};
