use super::{Scalar, Tensor};
use crate::error::{LatteError, Result};

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(eps > 0.0) {
        return Err(LatteError::InvalidArgument(format!(
            "finite-difference eps must be positive, got {eps}"
        )));
    }
    let h = T::of(eps);
    let two_h = T::of(2.0 * eps);
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(LatteError::NonFinite(format!(
                "function evaluation at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / two_h;
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let denom = na.max(nb).sqrt();
    if denom == 0.0 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    }
}
