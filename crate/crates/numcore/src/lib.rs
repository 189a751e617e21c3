//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. The
//! recording order is a topological order of the computation graph, so
//! [`Tape::backward`] walks the nodes once in reverse and accumulates
//! gradients additively across fan-out.
//!
//! Broadcasting is limited to leading batch dimensions: the right operand of
//! [`Var::add`] or [`Var::mul`] may have a shape that is a suffix of the left
//! operand's shape, and the right operand of [`Var::matmul`] may drop the
//! batch dimensions entirely.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod ops;
pub mod optim;
mod tensor;

pub use error::{Error, Result};
pub use graph::{Grads, Tape, Var};
pub use ops::conv::ConvSpec;
pub use ops::matmul;
pub use tensor::Tensor;
