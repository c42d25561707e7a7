//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Var::backward`] on a scalar walks the record in reverse once and
//! accumulates adjoints into the leaves registered with
//! [`Tape::param`]. Tapes are cheap and meant to be rebuilt for every forward
//! pass.
//!
//! Elementwise binary ops broadcast in three cases only: equal shapes, a
//! one-element operand, or an operand whose shape is a trailing suffix of the
//! other's (repeated over the leading axes). `matmul` broadcasts leading batch
//! axes under the same suffix rule.
//!
//! `f32` is the working precision; `f64` exists for gradient verification
//! with [`grad_check`].

mod error;
mod gradcheck;
mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use scalar::Scalar;
pub use tape::{CustomOp, NonFinite, Tape, Var, L2_EPS};
pub use tensor::Tensor;
