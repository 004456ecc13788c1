use super::{Axis, Scalar, Tensor};
use crate::error::{shape_err, LatteError, Result};

/// Softmax along `axis`, shifted by the lane maximum.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
    let (outer, n, inner) = logits.lanes(axis)?;
    if n == 0 {
        return Err(LatteError::DegenerateDistribution);
    }
    let src = logits.data();
    let mut out = Tensor::zeros(logits.shape());
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..n {
                let v = src[at(j)];
                if !v.is_finite() {
                    return Err(LatteError::NonFinite("softmax logit".into()));
                }
                if v > m {
                    m = v;
                }
            }
            let mut z = T::zero();
            for j in 0..n {
                let e = (src[at(j)] - m).exp();
                dst[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                dst[at(j)] /= z;
            }
        }
    }
    Ok(out)
}

/// In-place softmax of a contiguous slice. Returns the log normalizer.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    let inv = T::one() / z;
    for v in row.iter_mut() {
        *v *= inv;
    }
    m + z.ln()
}

/// Running maximum along `time_axis`.
pub fn cumulative_max<T: Scalar>(x: &Tensor<T>, time_axis: Axis) -> Result<Tensor<T>> {
    let (outer, n, inner) = x.lanes(time_axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            for t in 1..n {
                let prev = d[o * n * inner + (t - 1) * inner + i];
                let cur = &mut d[o * n * inner + t * inner + i];
                if prev > *cur {
                    *cur = prev;
                }
            }
        }
    }
    Ok(out)
}

/// One step of the running-max-shifted exponential accumulation.
///
/// `norm[l]` and `value[l, :]` hold sums scaled by `exp(-running_max[l])`.
/// On the first step (`first == true`) the running max is seeded with the
/// incoming logits, so the carried (zero) accumulators are scaled by one.
/// `value` is `L x M` row-major and `weights` has length `M`; pass empty
/// slices to skip the value accumulator.
#[inline]
pub fn shifted_exp_update<T: Scalar>(
    norm: &mut [T],
    value: &mut [T],
    running_max: &mut [T],
    logits: &[T],
    weights: &[T],
    first: bool,
) {
    let m = weights.len();
    for l in 0..logits.len() {
        let k = logits[l];
        let prev = if first { k } else { running_max[l] };
        // one of the two factors is exp(0) = 1
        let (cur, revert, add) = if k > prev {
            (k, (prev - k).exp(), T::one())
        } else {
            (prev, T::one(), (k - prev).exp())
        };
        norm[l] = norm[l] * revert + add;
        if m > 0 {
            let row = &mut value[l * m..(l + 1) * m];
            for (acc, &w) in row.iter_mut().zip(weights) {
                *acc = *acc * revert + add * w;
            }
        }
        running_max[l] = cur;
    }
}

/// Output of [`shifted_exp_cumsum`].
#[derive(Debug, Clone)]
pub struct ShiftedCumsum<T> {
    /// `[T, L]`: `sum_{s<=t} exp(logits[s,l] - running_max[t,l])`.
    pub norm: Tensor<T>,
    /// `[T, L, M]` weighted counterpart, when weights were supplied.
    pub value: Option<Tensor<T>>,
    /// `[T, L]`: cumulative max of the logits.
    pub running_max: Tensor<T>,
}

/// Cumulative exponential sums in running-max-shifted form, single
/// left-to-right pass.
pub fn shifted_exp_cumsum<T: Scalar>(
    logits: &Tensor<T>,
    weights: Option<&Tensor<T>>,
) -> Result<ShiftedCumsum<T>> {
    logits.expect_rank(2, "shifted_exp_cumsum logits")?;
    let (t_len, l_len) = (logits.dim(0), logits.dim(1));
    let m_len = match weights {
        Some(w) => {
            w.expect_rank(2, "shifted_exp_cumsum weights")?;
            if w.dim(0) != t_len {
                return Err(shape_err(format!(
                    "weights have {} rows, logits have {}",
                    w.dim(0),
                    t_len
                )));
            }
            w.dim(1)
        }
        None => 0,
    };
    let mut norm_acc = vec![T::zero(); l_len];
    let mut value_acc = vec![T::zero(); l_len * m_len];
    let mut mx = vec![T::zero(); l_len];
    let mut norm = Tensor::zeros(&[t_len, l_len]);
    let mut running_max = Tensor::zeros(&[t_len, l_len]);
    let mut value = weights.map(|_| Tensor::zeros(&[t_len, l_len, m_len]));
    let empty: [T; 0] = [];
    for t in 0..t_len {
        let row = &logits.data()[t * l_len..(t + 1) * l_len];
        let w_row = match weights {
            Some(w) => &w.data()[t * m_len..(t + 1) * m_len],
            None => &empty[..],
        };
        shifted_exp_update(&mut norm_acc, &mut value_acc, &mut mx, row, w_row, t == 0);
        norm.data_mut()[t * l_len..(t + 1) * l_len].copy_from_slice(&norm_acc);
        running_max.data_mut()[t * l_len..(t + 1) * l_len].copy_from_slice(&mx);
        if let Some(v) = value.as_mut() {
            let span = l_len * m_len;
            v.data_mut()[t * span..(t + 1) * span].copy_from_slice(&value_acc);
        }
    }
    Ok(ShiftedCumsum {
        norm,
        value,
        running_max,
    })
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Row-major matrix layout descriptor used by [`gemm`].
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl Layout {
    pub fn plain(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            transposed: false,
        }
    }

    /// A row-major `rows x cols` buffer read as its transpose.
    pub fn t(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            transposed: true,
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// Checked `c = a * b + beta * c` over contiguous row-major buffers.
pub fn gemm<T: Scalar>(a: &[T], la: Layout, b: &[T], lb: Layout, beta: T, c: &mut [T]) {
    let (m, k) = la.logical();
    let (k2, n) = lb.logical();
    assert_eq!(k, k2, "gemm inner dimensions differ");
    assert!(a.len() >= la.rows * la.cols);
    assert!(b.len() >= lb.rows * lb.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = *v * beta;
        }
        return;
    }
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    // SAFETY: extents were checked against the slice lengths above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[.., K] x [K, N] -> [.., N]`.
pub fn matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    w.expect_rank(2, "matmul weight")?;
    let k = w.dim(0);
    let n = w.dim(1);
    let last = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err("matmul of a rank-0 tensor"))?;
    if last != k {
        return Err(shape_err(format!(
            "matmul: input {:?} vs weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let rows = x.len() / k.max(1);
    let rows = if k == 0 {
        x.shape()[..x.rank() - 1].iter().product()
    } else {
        rows
    };
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let mut out = Tensor::zeros(&shape);
    gemm(
        x.data(),
        Layout::plain(rows, k),
        w.data(),
        Layout::plain(k, n),
        T::zero(),
        out.data_mut(),
    );
    Ok(out)
}
