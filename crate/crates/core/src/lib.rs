pub mod attention;
pub mod error;
pub mod latte;
pub mod linear;
pub mod macchiato;
pub mod numerics;

pub use attention::{AttentionMatrix, AttentionParams, MaskMode, SequenceBatch};
pub use error::{LatteError, Result};
pub use numerics::{Axis, DType, Scalar, Tensor};
