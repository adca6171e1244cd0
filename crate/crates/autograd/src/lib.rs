//! A compact reverse-mode automatic differentiation engine.
//!
//! Values are dense row-major `f64` tensors. A [`Graph`] records every
//! operation applied to its [`Var`] handles; [`Graph::backward`] walks the
//! tape in reverse. Image tensors use the NCHW layout throughout.

pub mod gradcheck;
mod graph;
mod ops;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::conv::ConvGeometry;
pub use ops::nn::{log_sum_exp, normal_cdf, normal_pdf};
pub use params::{clip_grad_norm, grad_norm, Adam, ParamBinding, ParamStore};
pub use tensor::{broadcast_shape, broadcast_zip, sum_to_shape, Tensor};
