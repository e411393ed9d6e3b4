//! Differentiable arrays, parameter storage and gradient verification.

mod conv;
mod fused;
pub mod gradcheck;
mod linalg;
pub mod nn;
mod ops;
mod params;
mod real;
mod tensor;
mod var;

pub use conv::Conv1dSpec;
pub use fused::attention;
pub use gradcheck::{check_parameters, gradient_check, CheckOptions, CheckReport};
pub use ops::concat;
pub use params::{ParameterSet, Session};
pub use real::{DType, Real};
pub use tensor::Tensor;
pub use var::Var;
