//! Dense arrays, stable reductions, and the finite-difference gradient oracle.
//!
//! Everything here is a pure function of its inputs. Scans accumulate
//! strictly left to right so that streaming and batch evaluation agree bit
//! for bit.

mod gradcheck;
mod linalg;
mod ops;
mod scalar;
mod tensor;

pub use gradcheck::{finite_difference_gradient, relative_error, DEFAULT_EPS};
pub use linalg::singular_values;
pub use ops::{
    cumulative_max, dot, gemm, matmul, shifted_exp_cumsum, shifted_exp_update, sigmoid, softmax,
    softmax_in_place, softplus, Layout, ShiftedCumsum,
};
pub use scalar::{DType, Scalar};
pub use tensor::{Axis, Tensor};
