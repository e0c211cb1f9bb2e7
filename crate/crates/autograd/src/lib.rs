//! Tensor-valued reverse-mode differentiation for small CPU networks.
//!
//! Provides the primitives the xsynth models are built from (3D/2D
//! convolution, pooling, upsampling, softmax, matrix products, elementwise
//! arithmetic and reductions), gradients of gradients for penalties such as
//! R1, a finite-difference checker and a checkpointable parameter store.

mod error;
pub mod gradcheck;
mod ops;
mod real;
pub mod store;
mod tensor;
mod var;

pub use error::{Error, Result};
pub use gradcheck::{
    grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport,
};
pub use ops::ConvSpec;
pub use real::Real;
pub use store::{EntryKind, ParamStore};
pub use tensor::{gemm, strides, Tensor};
pub use var::{
    backward, double_backward_available, grad, is_grad_enabled, no_grad, set_first_order_only,
    set_grad_enabled, GradModeGuard, Gradients, Var,
};
