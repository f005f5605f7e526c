//! Dense `f64` tensors with a Wengert-tape reverse-mode differentiator.
//!
//! Values are recorded on a [`GradTape`] through [`Var`] handles; a single
//! call to [`GradTape::backward`] yields the gradients of a scalar loss with
//! respect to every gradient-requiring leaf.

pub mod check;
pub mod codec;
mod error;
pub mod kernels;
pub mod suite;
mod tape;
mod tensor;
mod var;

pub use check::{check_gradients, finite_diff_check, relative_error, relative_error_floored, CheckOptions, CheckReport};
pub use error::{Result, TensorError};
pub use tape::{GradTape, Gradients, ResampleMap, PRIMITIVES};
pub use tensor::{Tensor, TENSOR_MAGIC};
pub use var::{concat, Var};
