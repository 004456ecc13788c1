//! Slice kernels for the hybrid mixer: causal convolution, the gated linear
//! recurrence, and gate packing. Layouts are `[B, T, D]` row-major.

use crate::numerics::{gemm, sigmoid, softplus, Layout, Scalar};

/// Decay sharpness of the recurrence.
pub const RGLRU_SHARPNESS: f64 = 8.0;

/// `y_t = sum_{i<K} W_i x_{t-i}` with zero padding on the left. Depthwise
/// weights are `[K, D]`, full weights `[K, D_in, D_out]` (square here).
pub fn causal_conv<T: Scalar>(
    x: &[T],
    w: &[T],
    batch: usize,
    seq: usize,
    width: usize,
    taps: usize,
    depthwise: bool,
) -> Vec<T> {
    let mut y = vec![T::zero(); batch * seq * width];
    for b in 0..batch {
        for i in 0..taps.min(seq) {
            // rows t in [i, seq) read x_{t-i}
            let rows = seq - i;
            let src = &x[(b * seq) * width..(b * seq + rows) * width];
            let dst = &mut y[(b * seq + i) * width..(b * seq + seq) * width];
            if depthwise {
                let wi = &w[i * width..(i + 1) * width];
                for (yr, xr) in dst.chunks_mut(width).zip(src.chunks(width)) {
                    for d in 0..width {
                        yr[d] += wi[d] * xr[d];
                    }
                }
            } else {
                let wi = &w[i * width * width..(i + 1) * width * width];
                gemm(
                    src,
                    Layout::plain(rows, width),
                    wi,
                    Layout::plain(width, width),
                    T::one(),
                    dst,
                );
            }
        }
    }
    y
}

/// Returns `(dx, dw)`.
pub fn causal_conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    batch: usize,
    seq: usize,
    width: usize,
    taps: usize,
    depthwise: bool,
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for b in 0..batch {
        for i in 0..taps.min(seq) {
            let rows = seq - i;
            let xs = &x[(b * seq) * width..(b * seq + rows) * width];
            let gs = &grad[(b * seq + i) * width..(b * seq + seq) * width];
            let dxs = &mut dx[(b * seq) * width..(b * seq + rows) * width];
            if depthwise {
                let wi = &w[i * width..(i + 1) * width];
                let dwi = &mut dw[i * width..(i + 1) * width];
                for ((xr, gr), dxr) in xs.chunks(width).zip(gs.chunks(width)).zip(dxs.chunks_mut(width)) {
                    for d in 0..width {
                        dxr[d] += wi[d] * gr[d];
                        dwi[d] += xr[d] * gr[d];
                    }
                }
            } else {
                let wi = &w[i * width * width..(i + 1) * width * width];
                gemm(gs, Layout::plain(rows, width), wi, Layout::t(width, width), T::one(), dxs);
                let dwi = &mut dw[i * width * width..(i + 1) * width * width];
                gemm(xs, Layout::t(rows, width), gs, Layout::plain(rows, width), T::one(), dwi);
            }
        }
    }
    (dx, dw)
}

/// Quantities of the recurrence kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RglruCache<T> {
    /// Recurrence gate `sigmoid(x W_rec)`.
    pub r: Vec<T>,
    /// Input gate `sigmoid(x W_in)`.
    pub i: Vec<T>,
    /// `log a_t`.
    pub log_a: Vec<T>,
    /// `h_t`, which is also the output.
    pub h: Vec<T>,
}

/// `h_t = a_t h_{t-1} + sqrt(1 - a_t^2) (i_t * x_t)` with
/// `log a_t = -c r_t softplus(-lambda)`. `rec_pre` and `in_pre` are the
/// gate pre-activations `x W_rec` and `x W_in`.
pub fn rglru_scan<T: Scalar>(
    x: &[T],
    rec_pre: &[T],
    in_pre: &[T],
    log_decay: &[T],
    batch: usize,
    seq: usize,
    width: usize,
) -> RglruCache<T> {
    let c = T::of(RGLRU_SHARPNESS);
    let base: Vec<T> = log_decay.iter().map(|&l| softplus(-l)).collect();
    let n = batch * seq * width;
    let mut cache = RglruCache {
        r: vec![T::zero(); n],
        i: vec![T::zero(); n],
        log_a: vec![T::zero(); n],
        h: vec![T::zero(); n],
    };
    let two = T::of(2.0);
    for b in 0..batch {
        let mut h = vec![T::zero(); width];
        for t in 0..seq {
            let row = (b * seq + t) * width;
            for d in 0..width {
                let at = row + d;
                let r = sigmoid(rec_pre[at]);
                let ig = sigmoid(in_pre[at]);
                let log_a = -c * r * base[d];
                let a = log_a.exp();
                let mult = (-(two * log_a).exp_m1()).sqrt();
                h[d] = a * h[d] + mult * (ig * x[at]);
                cache.r[at] = r;
                cache.i[at] = ig;
                cache.log_a[at] = log_a;
                cache.h[at] = h[d];
            }
        }
    }
    cache
}

/// Gradients `(dx_direct, d_rec_pre, d_in_pre, d_log_decay)`; the caller
/// adds the gate projections' contribution to `dx`.
#[allow(clippy::too_many_arguments)]
pub fn rglru_scan_backward<T: Scalar>(
    x: &[T],
    log_decay: &[T],
    cache: &RglruCache<T>,
    grad: &[T],
    batch: usize,
    seq: usize,
    width: usize,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let c = T::of(RGLRU_SHARPNESS);
    let two = T::of(2.0);
    let base: Vec<T> = log_decay.iter().map(|&l| softplus(-l)).collect();
    let dbase_dl: Vec<T> = log_decay.iter().map(|&l| -sigmoid(-l)).collect();
    let n = x.len();
    let mut dx = vec![T::zero(); n];
    let mut drec = vec![T::zero(); n];
    let mut din = vec![T::zero(); n];
    let mut dlam = vec![T::zero(); width];
    for b in 0..batch {
        let mut carry = vec![T::zero(); width];
        for t in (0..seq).rev() {
            let row = (b * seq + t) * width;
            for d in 0..width {
                let at = row + d;
                let g = grad[at] + carry[d];
                let log_a = cache.log_a[at];
                let a = log_a.exp();
                let a2 = (two * log_a).exp();
                let mult = (-(two * log_a).exp_m1()).sqrt();
                let h_prev = if t > 0 { cache.h[at - width] } else { T::zero() };
                let (r, ig) = (cache.r[at], cache.i[at]);
                let u = ig * x[at];
                let mut dlog_a = g * h_prev * a;
                if mult > T::zero() {
                    dlog_a -= g * u * a2 / mult;
                }
                let du = g * mult;
                dx[at] = du * ig;
                din[at] = du * x[at] * ig * (T::one() - ig);
                // log a = -c r base
                drec[at] = dlog_a * (-c * base[d]) * r * (T::one() - r);
                dlam[d] += dlog_a * (-c * r) * dbase_dl[d];
                carry[d] = g * a;
            }
        }
    }
    (dx, drec, din, dlam)
}

/// Pack `[B, T, H]` local-branch logits and `[B, T, H * slots]` latent
/// logits into `[B, T, H * (slots + 1)]` with the local logit first per head.
pub fn pack_gate<T: Scalar>(local: &[T], latent: &[T], rows: usize, heads: usize, slots: usize) -> Vec<T> {
    let w = slots + 1;
    let mut out = vec![T::zero(); rows * heads * w];
    for r in 0..rows {
        for h in 0..heads {
            let dst = &mut out[(r * heads + h) * w..(r * heads + h + 1) * w];
            dst[0] = local[r * heads + h];
            dst[1..].copy_from_slice(&latent[(r * heads + h) * slots..(r * heads + h + 1) * slots]);
        }
    }
    out
}

/// Inverse of [`pack_gate`].
pub fn unpack_gate<T: Scalar>(gate: &[T], rows: usize, heads: usize, slots: usize) -> (Vec<T>, Vec<T>) {
    let w = slots + 1;
    let mut local = vec![T::zero(); rows * heads];
    let mut latent = vec![T::zero(); rows * heads * slots];
    for r in 0..rows {
        for h in 0..heads {
            let src = &gate[(r * heads + h) * w..(r * heads + h + 1) * w];
            local[r * heads + h] = src[0];
            latent[(r * heads + h) * slots..(r * heads + h + 1) * slots].copy_from_slice(&src[1..]);
        }
    }
    (local, latent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_difference_gradient as fd, relative_error, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(n: usize, std: f64, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[n], std, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let (b, t, d, k) = (2, 6, 3, 3);
        for depthwise in [true, false] {
            let wn = if depthwise { k * d } else { k * d * d };
            let x = randn(b * t * d, 1.0, 1);
            let w = randn(wn, 1.0, 2);
            let g = randn(b * t * d, 1.0, 3);
            let f = |x: &Tensor<f64>, w: &Tensor<f64>| {
                Ok(dot(&causal_conv(x.data(), w.data(), b, t, d, k, depthwise), g.data()))
            };
            let (dx, dw) = causal_conv_backward(x.data(), w.data(), g.data(), b, t, d, k, depthwise);
            let nx = fd(|v| f(v, &w), &x, 1e-6).unwrap();
            let nw = fd(|v| f(&x, v), &w, 1e-6).unwrap();
            assert!(relative_error(&Tensor::new(vec![dx.len()], dx).unwrap(), &nx) < 1e-8);
            assert!(relative_error(&Tensor::new(vec![dw.len()], dw).unwrap(), &nw) < 1e-8);
        }
    }

    #[test]
    fn rglru_backward_matches_finite_differences() {
        let (b, t, d) = (2, 7, 3);
        let x = randn(b * t * d, 1.0, 4);
        let rp = randn(b * t * d, 1.0, 5);
        let ip = randn(b * t * d, 1.0, 6);
        let lam = randn(d, 1.0, 7).map(|v| v + 2.0);
        let g = randn(b * t * d, 1.0, 8);
        let f = |x: &Tensor<f64>, rp: &Tensor<f64>, ip: &Tensor<f64>, lam: &Tensor<f64>| {
            let c = rglru_scan(x.data(), rp.data(), ip.data(), lam.data(), b, t, d);
            Ok(dot(&c.h, g.data()))
        };
        let cache = rglru_scan(x.data(), rp.data(), ip.data(), lam.data(), b, t, d);
        let (dx, dr, di, dl) = rglru_scan_backward(x.data(), lam.data(), &cache, g.data(), b, t, d);
        let wrap = |v: Vec<f64>| Tensor::new(vec![v.len()], v).unwrap();
        let checks = [
            (wrap(dx), fd(|v| f(v, &rp, &ip, &lam), &x, 1e-6).unwrap()),
            (wrap(dr), fd(|v| f(&x, v, &ip, &lam), &rp, 1e-6).unwrap()),
            (wrap(di), fd(|v| f(&x, &rp, v, &lam), &ip, 1e-6).unwrap()),
            (wrap(dl), fd(|v| f(&x, &rp, &ip, v), &lam, 1e-6).unwrap()),
        ];
        for (a, n) in &checks {
            assert!(relative_error(a, n) < 1e-7, "{}", relative_error(a, n));
        }
    }

    #[test]
    fn gate_packing_round_trips() {
        let local = randn(6, 1.0, 9);
        let latent = randn(18, 1.0, 10);
        let packed = pack_gate(local.data(), latent.data(), 3, 2, 3);
        let (a, b) = unpack_gate(&packed, 3, 2, 3);
        assert_eq!(a, local.data());
        assert_eq!(b, latent.data());
    }
}
