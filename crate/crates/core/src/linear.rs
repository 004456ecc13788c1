//! Vanilla linear attention with positive exponential features, in direct
//! (quadratic) and recurrent form, and its undirected latent-variable reading.
//!
//! With `phi(x)_l = exp(x . p_l)` the normalized weights
//! `phi(q_t).phi(k_s) / sum_{s'<=t} phi(q_t).phi(k_s')` coincide with the
//! probabilities of a Markov network `s - l - t` whose potentials are the
//! feature entries. [`undirected_attention_probs`] evaluates the latter
//! literally so the two routes can be compared.
//!
//! The recurrent form keeps the unshifted running sums `S_t` and `z_t`; it
//! refuses logits beyond [`Scalar::UNSHIFTED_LOGIT_LIMIT`] since products of
//! exponentials overflow there. The stabilized alternative is the latte scan.

use crate::attention::{project, AttentionMatrix, AttentionParams, SequenceBatch};
use crate::error::{shape_err, LatteError, Result};
use crate::numerics::{matmul, Scalar, Tensor};

/// Positive feature map `x -> exp(x P)`.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    /// `[d_head, L]`.
    pub projection: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(projection: Tensor<T>) -> Result<Self> {
        projection.expect_rank(2, "feature projection")?;
        Ok(Self { projection })
    }

    pub fn features(&self) -> usize {
        self.projection.dim(1)
    }
}

/// Elementwise `exp(x P)` over the last axis.
pub fn feature_map_apply<T: Scalar>(x: &Tensor<T>, fm: &FeatureMap<T>) -> Result<Tensor<T>> {
    Ok(matmul(x, &fm.projection)?.map(|v| v.exp()))
}

/// Per-head feature logits `[B, T, H * L]` for queries and keys.
fn feature_logits<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &AttentionParams<T>,
    fm: &FeatureMap<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    params.validate()?;
    let h = params.heads;
    let d_head = params.w_q.dim(1) / h;
    if fm.projection.dim(0) != d_head {
        return Err(shape_err(format!(
            "feature projection expects width {}, head width is {d_head}",
            fm.projection.dim(0)
        )));
    }
    let (b, t) = (x.batch(), x.seq_len());
    let l = fm.features();
    let per_head = |proj: Tensor<T>| -> Result<Tensor<T>> {
        let split = proj.reshape(&[b * t * h, d_head])?;
        matmul(&split, &fm.projection)?.reshape(&[b, t, h * l])
    };
    let q = per_head(project(x, &params.w_q)?)?;
    let k = per_head(project(x, &params.w_k)?)?;
    let v = project(x, &params.w_v)?;
    Ok((q, k, v))
}

/// Shape of a multi-head linear-attention problem.
#[derive(Debug, Clone, Copy)]
pub struct LinearDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub features: usize,
    pub d_v: usize,
}

fn check_logit_range<T: Scalar>(logits: &[T]) -> Result<()> {
    let limit = T::UNSHIFTED_LOGIT_LIMIT;
    let magnitude = logits
        .iter()
        .map(|v| v.as_f64().abs())
        .fold(0.0, f64::max);
    if magnitude > limit || magnitude.is_nan() {
        return Err(LatteError::LogitRange { magnitude, limit });
    }
    Ok(())
}

/// Running sums of the recurrent form for every batch item and head.
#[derive(Debug, Clone)]
pub struct LinearAttnState<T> {
    /// `[B, H, d_v, L]`: `sum_s v_s phi(k_s)^T`.
    pub s: Tensor<T>,
    /// `[B, H, L]`: `sum_s phi(k_s)`.
    pub z: Tensor<T>,
    pub t: usize,
}

impl<T: Scalar> LinearAttnState<T> {
    pub fn new(batch: usize, heads: usize, features: usize, d_v: usize) -> Self {
        Self {
            s: Tensor::zeros(&[batch, heads, d_v, features]),
            z: Tensor::zeros(&[batch, heads, features]),
            t: 0,
        }
    }

    /// Absorb one step. `k_logits` is `[B, H * L]`, `v` is `[B, H * d_v]`.
    pub fn update(&mut self, k_logits: &[T], v: &[T]) {
        let sh = self.s.shape().to_vec();
        let (b_n, h_n, dv, l_n) = (sh[0], sh[1], sh[2], sh[3]);
        for b in 0..b_n {
            for h in 0..h_n {
                let bh = b * h_n + h;
                for l in 0..l_n {
                    let phi = k_logits[b * h_n * l_n + h * l_n + l].exp();
                    self.z.data_mut()[bh * l_n + l] += phi;
                    for d in 0..dv {
                        let vd = v[b * h_n * dv + h * dv + d];
                        self.s.data_mut()[(bh * dv + d) * l_n + l] += vd * phi;
                    }
                }
            }
        }
        self.t += 1;
    }

    /// `S_t phi(q_t) / (phi(q_t) . z_t)` as `[B, H * d_v]`.
    pub fn read(&self, q_logits: &[T]) -> Result<Vec<T>> {
        let sh = self.s.shape();
        let (b_n, h_n, dv, l_n) = (sh[0], sh[1], sh[2], sh[3]);
        let mut out = vec![T::zero(); b_n * h_n * dv];
        for b in 0..b_n {
            for h in 0..h_n {
                let bh = b * h_n + h;
                let phi: Vec<T> = (0..l_n)
                    .map(|l| q_logits[b * h_n * l_n + h * l_n + l].exp())
                    .collect();
                let den: T = (0..l_n).map(|l| phi[l] * self.z.data()[bh * l_n + l]).sum();
                if !(den > T::zero()) || !den.is_finite() {
                    return Err(LatteError::DegenerateNormalization);
                }
                for d in 0..dv {
                    let row = &self.s.data()[(bh * dv + d) * l_n..][..l_n];
                    let num: T = row.iter().zip(&phi).map(|(&a, &p)| a * p).sum();
                    out[b * h_n * dv + h * dv + d] = num / den;
                }
            }
        }
        Ok(out)
    }
}

/// Recurrent kernel over precomputed feature logits.
pub fn linear_recurrent_kernel<T: Scalar>(
    q_logits: &[T],
    k_logits: &[T],
    v: &[T],
    dims: LinearDims,
) -> Result<Vec<T>> {
    check_logit_range(q_logits)?;
    check_logit_range(k_logits)?;
    let (b_n, t_n, h_n, l_n, dv) = (dims.batch, dims.seq, dims.heads, dims.features, dims.d_v);
    let mut state = LinearAttnState::new(b_n, h_n, l_n, dv);
    let mut out = vec![T::zero(); b_n * t_n * h_n * dv];
    let (qs, vs) = (h_n * l_n, h_n * dv);
    let mut kq = vec![T::zero(); b_n * qs];
    let mut qq = vec![T::zero(); b_n * qs];
    let mut vv = vec![T::zero(); b_n * vs];
    for t in 0..t_n {
        for b in 0..b_n {
            let at = (b * t_n + t) * qs;
            kq[b * qs..(b + 1) * qs].copy_from_slice(&k_logits[at..at + qs]);
            qq[b * qs..(b + 1) * qs].copy_from_slice(&q_logits[at..at + qs]);
            let at = (b * t_n + t) * vs;
            vv[b * vs..(b + 1) * vs].copy_from_slice(&v[at..at + vs]);
        }
        state.update(&kq, &vv);
        let o = state.read(&qq)?;
        for b in 0..b_n {
            out[(b * t_n + t) * vs..][..vs].copy_from_slice(&o[b * vs..(b + 1) * vs]);
        }
    }
    Ok(out)
}

/// Gradients of [`linear_recurrent_kernel`] with respect to the query
/// logits, key logits and values.
pub fn linear_recurrent_backward<T: Scalar>(
    q_logits: &[T],
    k_logits: &[T],
    v: &[T],
    out: &[T],
    grad_out: &[T],
    dims: LinearDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b_n, t_n, h_n, l_n, dv) = (dims.batch, dims.seq, dims.heads, dims.features, dims.d_v);
    let (qs, vs) = (h_n * l_n, h_n * dv);
    let mut dq = vec![T::zero(); q_logits.len()];
    let mut dk = vec![T::zero(); k_logits.len()];
    let mut dvv = vec![T::zero(); v.len()];
    // per (b, h): S_t for every t, then a reverse sweep
    let mut s_hist = vec![T::zero(); t_n * dv * l_n];
    let mut z_hist = vec![T::zero(); t_n * l_n];
    let mut big_u = vec![T::zero(); dv * l_n];
    let mut small_u = vec![T::zero(); l_n];
    for b in 0..b_n {
        for h in 0..h_n {
            let qat = |t: usize, l: usize| (b * t_n + t) * qs + h * l_n + l;
            let vat = |t: usize, d: usize| (b * t_n + t) * vs + h * dv + d;
            let mut s_run = vec![T::zero(); dv * l_n];
            let mut z_run = vec![T::zero(); l_n];
            for t in 0..t_n {
                for l in 0..l_n {
                    let phi = k_logits[qat(t, l)].exp();
                    z_run[l] += phi;
                    for d in 0..dv {
                        s_run[d * l_n + l] += v[vat(t, d)] * phi;
                    }
                }
                s_hist[t * dv * l_n..(t + 1) * dv * l_n].copy_from_slice(&s_run);
                z_hist[t * l_n..(t + 1) * l_n].copy_from_slice(&z_run);
            }
            big_u.iter_mut().for_each(|x| *x = T::zero());
            small_u.iter_mut().for_each(|x| *x = T::zero());
            for t in (0..t_n).rev() {
                let phi_q: Vec<T> = (0..l_n).map(|l| q_logits[qat(t, l)].exp()).collect();
                let z_t = &z_hist[t * l_n..(t + 1) * l_n];
                let s_t = &s_hist[t * dv * l_n..(t + 1) * dv * l_n];
                let den: T = (0..l_n).map(|l| phi_q[l] * z_t[l]).sum();
                // dN = g / den; dden = -g . out / den
                let mut dden = T::zero();
                let mut dn = vec![T::zero(); dv];
                for d in 0..dv {
                    let g = grad_out[vat(t, d)];
                    dn[d] = g / den;
                    dden -= g * out[vat(t, d)] / den;
                }
                for l in 0..l_n {
                    let mut dphi = z_t[l] * dden;
                    for d in 0..dv {
                        dphi += s_t[d * l_n + l] * dn[d];
                    }
                    dq[qat(t, l)] = dphi * phi_q[l];
                    small_u[l] += dden * phi_q[l];
                    for d in 0..dv {
                        big_u[d * l_n + l] += dn[d] * phi_q[l];
                    }
                }
                for l in 0..l_n {
                    let phi_k = k_logits[qat(t, l)].exp();
                    let mut dphi = small_u[l];
                    for d in 0..dv {
                        dphi += big_u[d * l_n + l] * v[vat(t, d)];
                        dvv[vat(t, d)] += big_u[d * l_n + l] * phi_k;
                    }
                    dk[qat(t, l)] = dphi * phi_k;
                }
            }
        }
    }
    (dq, dk, dvv)
}

/// Quadratic-form linear attention. Weights are evaluated as a masked
/// softmax over `log sum_l exp(q_tl + k_sl)`, which never forms an
/// unshifted exponential.
pub fn linear_attention_direct<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &AttentionParams<T>,
    fm: &FeatureMap<T>,
) -> Result<(SequenceBatch<T>, AttentionMatrix<T>)> {
    let (q, k, v) = feature_logits(x, params, fm)?;
    let (b_n, t_n, h_n, l_n) = (x.batch(), x.seq_len(), params.heads, fm.features());
    let dv = v.dim(2) / h_n;
    let mut probs = Tensor::zeros(&[b_n, h_n, t_n, t_n]);
    let mut out = Tensor::zeros(&[b_n, t_n, h_n * dv]);
    let mut logw = vec![T::zero(); t_n];
    for b in 0..b_n {
        for h in 0..h_n {
            for t in 0..t_n {
                let qt = &q.data()[(b * t_n + t) * h_n * l_n + h * l_n..][..l_n];
                let mut m_row = T::neg_infinity();
                for s in 0..=t {
                    let ks = &k.data()[(b * t_n + s) * h_n * l_n + h * l_n..][..l_n];
                    let m = qt
                        .iter()
                        .zip(ks)
                        .map(|(&a, &c)| a + c)
                        .fold(T::neg_infinity(), T::max);
                    let lse = m + qt
                        .iter()
                        .zip(ks)
                        .map(|(&a, &c)| (a + c - m).exp())
                        .sum::<T>()
                        .ln();
                    logw[s] = lse;
                    if lse > m_row {
                        m_row = lse;
                    }
                }
                let z: T = (0..=t).map(|s| (logw[s] - m_row).exp()).sum();
                if !(z > T::zero()) {
                    return Err(LatteError::DegenerateNormalization);
                }
                let row = &mut probs.data_mut()[((b * h_n + h) * t_n + t) * t_n..][..t_n];
                for s in 0..=t {
                    row[s] = (logw[s] - m_row).exp() / z;
                }
                let o = &mut out.data_mut()[(b * t_n + t) * h_n * dv + h * dv..][..dv];
                for s in 0..=t {
                    let vs = &v.data()[(b * t_n + s) * h_n * dv + h * dv..][..dv];
                    for d in 0..dv {
                        o[d] += row[s] * vs[d];
                    }
                }
            }
        }
    }
    Ok((SequenceBatch::new(out)?, AttentionMatrix { probs }))
}

/// Recurrent form: `S_t = S_{t-1} + v_t phi(k_t)^T`, `z_t = z_{t-1} + phi(k_t)`.
pub fn linear_attention_recurrent<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &AttentionParams<T>,
    fm: &FeatureMap<T>,
) -> Result<SequenceBatch<T>> {
    let (q, k, v) = feature_logits(x, params, fm)?;
    let dims = LinearDims {
        batch: x.batch(),
        seq: x.seq_len(),
        heads: params.heads,
        features: fm.features(),
        d_v: v.dim(2) / params.heads,
    };
    let out = linear_recurrent_kernel(q.data(), k.data(), v.data(), dims)?;
    SequenceBatch::new(Tensor::new(
        vec![dims.batch, dims.seq, dims.heads * dims.d_v],
        out,
    )?)
}

/// Attention probabilities of the undirected latent model,
/// `a_ts = sum_l psi(s,l) psi(l,t) / (sum_l' psi(l',t) sum_{s'<=t} psi(s',l'))`.
pub fn undirected_attention_probs<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &AttentionParams<T>,
    fm: &FeatureMap<T>,
) -> Result<AttentionMatrix<T>> {
    let (q, k, _) = feature_logits(x, params, fm)?;
    let (b_n, t_n, h_n, l_n) = (x.batch(), x.seq_len(), params.heads, fm.features());
    let mut probs = Tensor::zeros(&[b_n, h_n, t_n, t_n]);
    for b in 0..b_n {
        for h in 0..h_n {
            let q_at = |t: usize, l: usize| q.data()[(b * t_n + t) * h_n * l_n + h * l_n + l];
            let k_at = |s: usize, l: usize| k.data()[(b * t_n + s) * h_n * l_n + h * l_n + l];
            // One shift for every key potential and one per query row; both
            // cancel between numerator and denominator.
            let k_shift = (0..t_n)
                .flat_map(|s| (0..l_n).map(move |l| (s, l)))
                .map(|(s, l)| k_at(s, l))
                .fold(T::neg_infinity(), T::max);
            let psi_k = |s: usize, l: usize| (k_at(s, l) - k_shift).exp();
            let mut col_sums = vec![T::zero(); l_n];
            for t in 0..t_n {
                for (l, c) in col_sums.iter_mut().enumerate() {
                    *c += psi_k(t, l);
                }
                let q_shift = (0..l_n).map(|l| q_at(t, l)).fold(T::neg_infinity(), T::max);
                let psi_q: Vec<T> = (0..l_n).map(|l| (q_at(t, l) - q_shift).exp()).collect();
                let den: T = (0..l_n).map(|l| psi_q[l] * col_sums[l]).sum();
                if !(den > T::zero()) {
                    return Err(LatteError::DegenerateNormalization);
                }
                let row = &mut probs.data_mut()[((b * h_n + h) * t_n + t) * t_n..][..t_n];
                for (s, r) in row.iter_mut().enumerate().take(t + 1) {
                    let num: T = (0..l_n).map(|l| psi_k(s, l) * psi_q[l]).sum();
                    *r = num / den;
                }
            }
        }
    }
    Ok(AttentionMatrix { probs })
}
