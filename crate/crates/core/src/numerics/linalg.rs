use nalgebra::DMatrix;

use super::{Scalar, Tensor};
use crate::error::Result;

/// Singular values of a rank-2 tensor in descending order (computed in f64).
pub fn singular_values<T: Scalar>(m: &Tensor<T>) -> Result<Vec<f64>> {
    m.expect_rank(2, "singular_values")?;
    let (r, c) = (m.dim(0), m.dim(1));
    let mat = DMatrix::from_row_iterator(r, c, m.data().iter().map(|v| v.as_f64()));
    let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(sv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, 2.0, 3.0];
        let v = [4.0, -1.0, 0.5];
        let m = Tensor::from_fn(&[3, 3], |i| u[i / 3] * v[i % 3]);
        let sv = singular_values::<f64>(&m).unwrap();
        assert!(sv[1] <= 1e-12 * sv[0]);
    }
}
