//! Slice-level latent scan used by the causal mixers.
//!
//! Inputs are laid out `[B, T, H * slots]` for the slot probabilities and key
//! logits and `[B, T, H * d_v]` for the values. The probabilities need not sum
//! to one; the hybrid mixer passes the latent part of a larger gate.

use crate::numerics::{shifted_exp_update, softmax_in_place, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Latent slots per head.
    pub slots: usize,
    /// Value width per head.
    pub d_v: usize,
}

impl ScanDims {
    pub fn slot_width(&self) -> usize {
        self.heads * self.slots
    }

    pub fn value_width(&self) -> usize {
        self.heads * self.d_v
    }
}

/// Softmax over each head's block of `slots` logits, in place.
pub fn head_softmax<T: Scalar>(logits: &mut [T], slots: usize) {
    if slots == 0 {
        return;
    }
    for row in logits.chunks_mut(slots) {
        softmax_in_place(row);
    }
}

/// `out = sum_l p_l * carry_l / norm_l`.
#[inline]
pub(crate) fn emit<T: Scalar>(probs: &[T], norm: &[T], carry: &[T], out: &mut [T]) {
    let dv = out.len();
    out.iter_mut().for_each(|o| *o = T::zero());
    for l in 0..probs.len() {
        let c = probs[l] / norm[l];
        for (o, &v) in out.iter_mut().zip(&carry[l * dv..(l + 1) * dv]) {
            *o += c * v;
        }
    }
}

/// Absorb one token into a head's shifted state and emit its output.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_step<T: Scalar>(
    norm: &mut [T],
    carry: &mut [T],
    running_max: &mut [T],
    k_row: &[T],
    v_row: &[T],
    p_row: &[T],
    out_row: &mut [T],
    first: bool,
) {
    shifted_exp_update(norm, carry, running_max, k_row, v_row, first);
    emit(p_row, norm, carry, out_row);
}

/// Causal latent scan. `unroll` is the number of steps gathered into a
/// contiguous block per iteration; it does not affect the arithmetic.
pub fn latent_scan<T: Scalar>(
    probs: &[T],
    k_logits: &[T],
    v: &[T],
    dims: ScanDims,
    unroll: usize,
) -> Vec<T> {
    let ScanDims {
        batch,
        seq,
        heads,
        slots,
        d_v,
    } = dims;
    let (sw, vw) = (dims.slot_width(), dims.value_width());
    let unroll = unroll.max(1);
    let mut out = vec![T::zero(); batch * seq * vw];
    if slots == 0 || d_v == 0 {
        return out;
    }
    let mut norm = vec![T::zero(); slots];
    let mut carry = vec![T::zero(); slots * d_v];
    let mut mx = vec![T::zero(); slots];
    let mut kb = vec![T::zero(); unroll * slots];
    let mut pb = vec![T::zero(); unroll * slots];
    let mut vb = vec![T::zero(); unroll * d_v];
    let mut ob = vec![T::zero(); unroll * d_v];
    for b in 0..batch {
        for h in 0..heads {
            norm.iter_mut().for_each(|x| *x = T::zero());
            carry.iter_mut().for_each(|x| *x = T::zero());
            let mut start = 0;
            while start < seq {
                let len = unroll.min(seq - start);
                for j in 0..len {
                    let row = b * seq + start + j;
                    let ks = row * sw + h * slots;
                    kb[j * slots..(j + 1) * slots].copy_from_slice(&k_logits[ks..ks + slots]);
                    pb[j * slots..(j + 1) * slots].copy_from_slice(&probs[ks..ks + slots]);
                    let vs = row * vw + h * d_v;
                    vb[j * d_v..(j + 1) * d_v].copy_from_slice(&v[vs..vs + d_v]);
                }
                for j in 0..len {
                    scan_step(
                        &mut norm,
                        &mut carry,
                        &mut mx,
                        &kb[j * slots..(j + 1) * slots],
                        &vb[j * d_v..(j + 1) * d_v],
                        &pb[j * slots..(j + 1) * slots],
                        &mut ob[j * d_v..(j + 1) * d_v],
                        start + j == 0,
                    );
                }
                for j in 0..len {
                    let os = (b * seq + start + j) * vw + h * d_v;
                    out[os..os + d_v].copy_from_slice(&ob[j * d_v..(j + 1) * d_v]);
                }
                start += len;
            }
        }
    }
    out
}

/// Gradients of [`latent_scan`] with respect to the probabilities, key
/// logits and values. Each head's forward states are kept for the whole
/// sequence, one head at a time.
pub fn latent_scan_backward<T: Scalar>(
    probs: &[T],
    k_logits: &[T],
    v: &[T],
    grad_out: &[T],
    dims: ScanDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ScanDims {
        batch,
        seq,
        heads,
        slots,
        d_v,
    } = dims;
    let (sw, vw) = (dims.slot_width(), dims.value_width());
    let mut dp = vec![T::zero(); probs.len()];
    let mut dk = vec![T::zero(); k_logits.len()];
    let mut dv = vec![T::zero(); v.len()];
    if slots == 0 || d_v == 0 || seq == 0 {
        return (dp, dk, dv);
    }
    let mut hist_norm = vec![T::zero(); seq * slots];
    let mut hist_carry = vec![T::zero(); seq * slots * d_v];
    let mut hist_mx = vec![T::zero(); seq * slots];
    let mut norm = vec![T::zero(); slots];
    let mut carry = vec![T::zero(); slots * d_v];
    let mut mx = vec![T::zero(); slots];
    let mut big_r = vec![T::zero(); slots * d_v];
    let mut small_r = vec![T::zero(); slots];
    let mut m_next = vec![T::zero(); slots];
    let mut vbar = vec![T::zero(); d_v];
    let mut dv_acc = vec![T::zero(); d_v];

    for b in 0..batch {
        for h in 0..heads {
            let k_at = |t: usize| {
                let s = (b * seq + t) * sw + h * slots;
                s..s + slots
            };
            let v_at = |t: usize| {
                let s = (b * seq + t) * vw + h * d_v;
                s..s + d_v
            };
            norm.iter_mut().for_each(|x| *x = T::zero());
            carry.iter_mut().for_each(|x| *x = T::zero());
            mx.iter_mut().for_each(|x| *x = T::zero());
            for t in 0..seq {
                shifted_exp_update(&mut norm, &mut carry, &mut mx, &k_logits[k_at(t)], &v[v_at(t)], t == 0);
                hist_norm[t * slots..(t + 1) * slots].copy_from_slice(&norm);
                hist_mx[t * slots..(t + 1) * slots].copy_from_slice(&mx);
                hist_carry[t * slots * d_v..(t + 1) * slots * d_v].copy_from_slice(&carry);
            }
            big_r.iter_mut().for_each(|x| *x = T::zero());
            small_r.iter_mut().for_each(|x| *x = T::zero());
            m_next.copy_from_slice(&mx);
            for t in (0..seq).rev() {
                let g = &grad_out[v_at(t)];
                let krange = k_at(t);
                let vt = &v[v_at(t)];
                dv_acc.iter_mut().for_each(|x| *x = T::zero());
                for l in 0..slots {
                    let nrm = hist_norm[t * slots + l];
                    let m_t = hist_mx[t * slots + l];
                    let c = &hist_carry[(t * slots + l) * d_v..(t * slots + l + 1) * d_v];
                    let mut dpl = T::zero();
                    for d in 0..d_v {
                        vbar[d] = c[d] / nrm;
                        dpl += g[d] * vbar[d];
                    }
                    dp[krange.start + l] = dpl;
                    let p = probs[krange.start + l];
                    let decay = if m_t == m_next[l] { T::one() } else { (m_t - m_next[l]).exp() };
                    let row = &mut big_r[l * d_v..(l + 1) * d_v];
                    let mut vd = T::zero();
                    for d in 0..d_v {
                        let dvbar = p * g[d];
                        row[d] = row[d] * decay + dvbar / nrm;
                        vd += vbar[d] * dvbar;
                    }
                    small_r[l] = small_r[l] * decay + vd / nrm;
                    m_next[l] = m_t;
                    let k = k_logits[krange.start + l];
                    let w = if k == m_t { T::one() } else { (k - m_t).exp() };
                    let mut vr = T::zero();
                    for d in 0..d_v {
                        dv_acc[d] += w * row[d];
                        vr += vt[d] * row[d];
                    }
                    dk[krange.start + l] = w * (vr - small_r[l]);
                }
                for (dst, &a) in dv[v_at(t)].iter_mut().zip(&dv_acc) {
                    *dst += a;
                }
            }
        }
    }
    (dp, dk, dv)
}

/// Backward of [`head_softmax`]: `dz = p * (dp - sum(p * dp))` per head.
pub fn head_softmax_backward<T: Scalar>(probs: &[T], grad: &[T], slots: usize) -> Vec<T> {
    let mut out = vec![T::zero(); probs.len()];
    if slots == 0 {
        return out;
    }
    for ((o, p), g) in out
        .chunks_mut(slots)
        .zip(probs.chunks(slots))
        .zip(grad.chunks(slots))
    {
        let s: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for l in 0..slots {
            o[l] = p[l] * (g[l] - s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient as fd, relative_error, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(probs: &[f64], k: &[f64], v: &[f64], dims: ScanDims) -> Vec<f64> {
        let (sw, vw) = (dims.slot_width(), dims.value_width());
        let mut out = vec![0.0; dims.batch * dims.seq * vw];
        for b in 0..dims.batch {
            for h in 0..dims.heads {
                for t in 0..dims.seq {
                    for l in 0..dims.slots {
                        let ki = |s: usize| k[(b * dims.seq + s) * sw + h * dims.slots + l];
                        let m = (0..=t).map(ki).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..=t).map(|s| (ki(s) - m).exp()).sum();
                        let p = probs[(b * dims.seq + t) * sw + h * dims.slots + l];
                        for d in 0..dims.d_v {
                            let num: f64 = (0..=t)
                                .map(|s| {
                                    (ki(s) - m).exp() * v[(b * dims.seq + s) * vw + h * dims.d_v + d]
                                })
                                .sum();
                            out[(b * dims.seq + t) * vw + h * dims.d_v + d] += p * num / z;
                        }
                    }
                }
            }
        }
        out
    }

    fn inputs(dims: ScanDims, seed: u64, kscale: f64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.batch * dims.seq;
        let p = Tensor::randn(&[n * dims.slot_width()], 1.0, &mut r).map(|x: f64| x.abs());
        let k = Tensor::randn(&[n * dims.slot_width()], kscale, &mut r);
        let v = Tensor::randn(&[n * dims.value_width()], 1.0, &mut r);
        (p, k, v)
    }

    const DIMS: ScanDims = ScanDims {
        batch: 2,
        seq: 11,
        heads: 2,
        slots: 3,
        d_v: 2,
    };

    #[test]
    fn scan_matches_naive() {
        let (p, k, v) = inputs(DIMS, 1, 3.0);
        let got = latent_scan(p.data(), k.data(), v.data(), DIMS, 4);
        let want = naive(p.data(), k.data(), v.data(), DIMS);
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn unroll_is_bit_identical() {
        let (p, k, v) = inputs(DIMS, 2, 1.0);
        let a = latent_scan(p.data(), k.data(), v.data(), DIMS, 1);
        for u in [3, 32] {
            assert_eq!(a, latent_scan(p.data(), k.data(), v.data(), DIMS, u));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (unroll, kscale) in [(1, 1.0), (4, 5.0), (32, 1.0)] {
            let (p, k, v) = inputs(DIMS, 3, kscale);
            let mut r = ChaCha8Rng::seed_from_u64(4);
            let g = Tensor::<f64>::randn(&[v.len()], 1.0, &mut r);
            let loss = |p: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
                let o = latent_scan(p.data(), k.data(), v.data(), DIMS, unroll);
                Ok(crate::numerics::dot(&o, g.data()))
            };
            let (dp, dk, dv) = latent_scan_backward(p.data(), k.data(), v.data(), g.data(), DIMS);
            let wrap = |d: Vec<f64>| Tensor::new(vec![d.len()], d).unwrap();
            let np = fd(|t| loss(t, &k, &v), &p, 1e-6).unwrap();
            let nk = fd(|t| loss(&p, t, &v), &k, 1e-6).unwrap();
            let nv = fd(|t| loss(&p, &k, t), &v, 1e-6).unwrap();
            assert!(relative_error(&wrap(dp), &np) < 1e-7);
            assert!(relative_error(&wrap(dk), &nk) < 1e-7);
            assert!(relative_error(&wrap(dv), &nv) < 1e-7);
        }
    }

    #[test]
    fn head_softmax_backward_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::<f64>::randn(&[12], 1.0, &mut r);
        let g = Tensor::<f64>::randn(&[12], 1.0, &mut r);
        let mut p = z.data().to_vec();
        head_softmax(&mut p, 4);
        let got = head_softmax_backward(&p, g.data(), 4);
        let num = fd(
            |t| {
                let mut q = t.data().to_vec();
                head_softmax(&mut q, 4);
                Ok(crate::numerics::dot(&q, g.data()))
            },
            &z,
            1e-6,
        )
        .unwrap();
        assert!(relative_error(&Tensor::new(vec![12], got).unwrap(), &num) < 1e-8);
    }

    #[test]
    fn empty_slots_give_zero_output() {
        let dims = ScanDims { slots: 0, ..DIMS };
        let v = vec![1.0f64; dims.batch * dims.seq * dims.value_width()];
        let out = latent_scan(&[], &[], &v, dims, 8);
        assert!(out.iter().all(|&x| x == 0.0));
    }
}
