//! Latent attention with a directed latent variable.
//!
//! Each token `t` picks one of `L` latent slots with `p(l | t)`, a softmax of
//! query logits over the slots of its head, and every slot summarizes the
//! (prefix of the) sequence with `p(s | l)`, a softmax of key logits over
//! positions. The output is `sum_l p(l|t) sum_s p(s|l) v_s`.
//!
//! The causal form is computed in one left-to-right pass over running
//! exponential sums, kept relative to a per-slot running maximum so that key
//! logits in the hundreds stay finite. [`latte_step`] exposes the same update
//! one token at a time.

pub mod kernel;

use crate::attention::{project, AttentionMatrix, SequenceBatch};
use crate::error::{shape_err, LatteError, Result};
use crate::numerics::{matmul, Scalar, Tensor};
use kernel::{head_softmax, latent_scan, scan_step, ScanDims};

pub use kernel::{head_softmax_backward, latent_scan_backward};

/// Sequence-length limit of the quadratic reference.
pub const BRUTEFORCE_MAX_LEN: usize = 4096;

/// Default number of scan steps per loop block.
pub const DEFAULT_UNROLL: usize = 32;

#[derive(Debug, Clone)]
pub struct LatteParams<T> {
    /// `[D, L]`, column `l` scores tokens for slot `l`.
    pub w_q: Tensor<T>,
    /// `[D, L]`.
    pub w_k: Tensor<T>,
    /// `[D, Dv]`.
    pub w_v: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> LatteParams<T> {
    pub fn new(w_q: Tensor<T>, w_k: Tensor<T>, w_v: Tensor<T>, heads: usize) -> Result<Self> {
        let p = Self {
            w_q,
            w_k,
            w_v,
            heads,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn random<R: rand::Rng + ?Sized>(
        d_model: usize,
        latents: usize,
        d_v: usize,
        heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            Tensor::randn(&[d_model, latents], std, rng),
            Tensor::randn(&[d_model, latents], std, rng),
            Tensor::randn(&[d_model, d_v], std, rng),
            heads,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.w_q.expect_rank(2, "W_q")?;
        self.w_k.expect_shape(self.w_q.shape())?;
        self.w_v.expect_rank(2, "W_v")?;
        if self.w_v.dim(0) != self.w_q.dim(0) {
            return Err(shape_err("W_v input width differs from W_q"));
        }
        let (l, dv) = (self.w_q.dim(1), self.w_v.dim(1));
        if self.heads == 0 || l % self.heads != 0 || dv % self.heads != 0 {
            return Err(shape_err(format!(
                "{} heads do not divide L = {l} and Dv = {dv}",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.w_q.dim(0)
    }

    pub fn latents(&self) -> usize {
        self.w_q.dim(1)
    }

    pub fn d_v(&self) -> usize {
        self.w_v.dim(1)
    }

    pub fn slots_per_head(&self) -> usize {
        self.latents() / self.heads
    }

    pub fn scan_dims(&self, batch: usize, seq: usize) -> ScanDims {
        ScanDims {
            batch,
            seq,
            heads: self.heads,
            slots: self.slots_per_head(),
            d_v: self.d_v() / self.heads,
        }
    }

    pub fn cast<U: Scalar>(&self) -> LatteParams<U> {
        LatteParams {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            heads: self.heads,
        }
    }
}

/// Streaming state: per batch item and head, the shifted normalizers,
/// shifted value sums and the running key maximum.
#[derive(Debug, Clone)]
pub struct LatteState<T> {
    /// `[B, H, L/H]`.
    pub alpha_shifted: Tensor<T>,
    /// `[B, H, L/H, Dv/H]`.
    pub vtilde_shifted: Tensor<T>,
    /// `[B, H, L/H]`.
    pub running_max: Tensor<T>,
    pub t: usize,
}

impl<T: Scalar> LatteState<T> {
    pub fn new(batch: usize, params: &LatteParams<T>) -> Self {
        let dims = params.scan_dims(batch, 0);
        Self {
            alpha_shifted: Tensor::zeros(&[batch, dims.heads, dims.slots]),
            vtilde_shifted: Tensor::zeros(&[batch, dims.heads, dims.slots, dims.d_v]),
            running_max: Tensor::zeros(&[batch, dims.heads, dims.slots]),
            t: 0,
        }
    }
}

/// Intermediates of the quadratic reference, all in unshifted form.
#[derive(Debug, Clone)]
pub struct LatteTrace<T> {
    /// `[B, T, L]`: `exp(query logits)`.
    pub psi_q: Tensor<T>,
    /// `[B, T, L]`: `exp(key logits)`.
    pub psi_k: Tensor<T>,
    /// `[B, T, H]`: per-head sums of `psi_q`.
    pub beta: Tensor<T>,
    /// `[B, T, L]`: key normalizers over the visible prefix (or the whole
    /// sequence for the bidirectional form).
    pub alpha: Tensor<T>,
    /// `[B, T, L]`: `psi_q / (beta * alpha)`.
    pub gamma: Tensor<T>,
    /// `[B, T, L, Dv/H]`: `sum_s psi_k v_s` over the visible keys.
    pub vtilde: Tensor<T>,
    pub probs: AttentionMatrix<T>,
}

struct Projected<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    dims: ScanDims,
}

fn projections<T: Scalar>(x: &SequenceBatch<T>, params: &LatteParams<T>) -> Result<Projected<T>> {
    params.validate()?;
    Ok(Projected {
        q: project(x, &params.w_q)?,
        k: project(x, &params.w_k)?,
        v: project(x, &params.w_v)?,
        dims: params.scan_dims(x.batch(), x.seq_len()),
    })
}

fn to_batch<T: Scalar>(dims: ScanDims, data: Vec<T>) -> Result<SequenceBatch<T>> {
    SequenceBatch::new(Tensor::new(
        vec![dims.batch, dims.seq, dims.value_width()],
        data,
    )?)
}

/// Bidirectional form: every slot summarizes the whole sequence. Runs in
/// `O(T L Dv)` without forming the `T x T` matrix; with `keep_trace` the
/// implied attention matrix is assembled as well.
pub fn latte_bidirectional<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &LatteParams<T>,
    keep_trace: bool,
) -> Result<(SequenceBatch<T>, Option<LatteTrace<T>>)> {
    let Projected { q, k, v, dims } = projections(x, params)?;
    let ScanDims {
        batch,
        seq,
        heads,
        slots,
        d_v,
    } = dims;
    let (sw, vw) = (dims.slot_width(), dims.value_width());
    let mut p_lt = q.data().to_vec();
    head_softmax(&mut p_lt, slots);

    // p(s | l): softmax of key logits over all positions
    let mut p_sl = vec![T::zero(); k.len()];
    let mut vbar = vec![T::zero(); batch * sw * d_v];
    for b in 0..batch {
        for c in 0..sw {
            let at = |s: usize| (b * seq + s) * sw + c;
            let m = (0..seq).map(|s| k.data()[at(s)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for s in 0..seq {
                let e = (k.data()[at(s)] - m).exp();
                p_sl[at(s)] = e;
                z += e;
            }
            let h = c / slots;
            for s in 0..seq {
                p_sl[at(s)] /= z;
                let vs = &v.data()[(b * seq + s) * vw + h * d_v..][..d_v];
                let dst = &mut vbar[(b * sw + c) * d_v..][..d_v];
                for d in 0..d_v {
                    dst[d] += p_sl[at(s)] * vs[d];
                }
            }
        }
    }
    let mut out = vec![T::zero(); batch * seq * vw];
    for b in 0..batch {
        for t in 0..seq {
            for c in 0..sw {
                let h = c / slots;
                let p = p_lt[(b * seq + t) * sw + c];
                let src = &vbar[(b * sw + c) * d_v..][..d_v];
                let dst = &mut out[(b * seq + t) * vw + h * d_v..][..d_v];
                for d in 0..d_v {
                    dst[d] += p * src[d];
                }
            }
        }
    }
    let out = to_batch(dims, out)?;
    if !keep_trace {
        return Ok((out, None));
    }

    let psi_q = q.map(|z| z.exp());
    let psi_k = k.map(|z| z.exp());
    let beta = Tensor::from_fn(&[batch, seq, heads], |i| {
        psi_q.data()[i * slots..(i + 1) * slots].iter().copied().sum()
    });
    let mut alpha = Tensor::zeros(&[batch, seq, sw]);
    let mut vtilde = Tensor::zeros(&[batch, seq, sw, d_v]);
    for b in 0..batch {
        for c in 0..sw {
            let h = c / slots;
            let mut a = T::zero();
            let mut acc = vec![T::zero(); d_v];
            for s in 0..seq {
                let e = psi_k.data()[(b * seq + s) * sw + c];
                a += e;
                let vs = &v.data()[(b * seq + s) * vw + h * d_v..][..d_v];
                for d in 0..d_v {
                    acc[d] += e * vs[d];
                }
            }
            for t in 0..seq {
                alpha.data_mut()[(b * seq + t) * sw + c] = a;
                vtilde.data_mut()[((b * seq + t) * sw + c) * d_v..][..d_v].copy_from_slice(&acc);
            }
        }
    }
    let gamma = Tensor::from_fn(&[batch, seq, sw], |i| {
        let h = (i % sw) / slots;
        psi_q.data()[i] / (beta.data()[(i / sw) * heads + h] * alpha.data()[i])
    });
    let mut probs = Tensor::zeros(&[batch, heads, seq, seq]);
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                for s in 0..seq {
                    let mut a = T::zero();
                    for l in 0..slots {
                        let c = h * slots + l;
                        a += p_lt[(b * seq + t) * sw + c] * p_sl[(b * seq + s) * sw + c];
                    }
                    probs.data_mut()[((b * heads + h) * seq + t) * seq + s] = a;
                }
            }
        }
    }
    let trace = LatteTrace {
        psi_q,
        psi_k,
        beta,
        alpha,
        gamma,
        vtilde,
        probs: AttentionMatrix { probs },
    };
    Ok((out, Some(trace)))
}

/// Quadratic causal reference, evaluated in 64-bit arithmetic.
pub fn latte_causal_bruteforce<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &LatteParams<T>,
) -> Result<(SequenceBatch<T>, LatteTrace<T>)> {
    if x.seq_len() > BRUTEFORCE_MAX_LEN {
        return Err(LatteError::OracleGuard {
            len: x.seq_len(),
            guard: BRUTEFORCE_MAX_LEN,
        });
    }
    let x64 = SequenceBatch::new(x.values().cast::<f64>())?;
    let Projected { q, k, v, dims } = projections(&x64, &params.cast::<f64>())?;
    let ScanDims {
        batch,
        seq,
        heads,
        slots,
        d_v,
    } = dims;
    let (sw, vw) = (dims.slot_width(), dims.value_width());
    let mut p_lt = q.data().to_vec();
    head_softmax(&mut p_lt, slots);

    let mut probs = vec![0.0f64; batch * heads * seq * seq];
    let mut weights = vec![0.0f64; seq];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let row = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                for l in 0..slots {
                    let c = h * slots + l;
                    let kk = |s: usize| k.data()[(b * seq + s) * sw + c];
                    let m = (0..=t).map(kk).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (s, w) in weights.iter_mut().enumerate().take(t + 1) {
                        *w = (kk(s) - m).exp();
                        z += *w;
                    }
                    let p = p_lt[(b * seq + t) * sw + c];
                    for s in 0..=t {
                        row[s] += p * weights[s] / z;
                    }
                }
            }
        }
    }
    let mut out = vec![0.0f64; batch * seq * vw];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let row = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                let dst = &mut out[(b * seq + t) * vw + h * d_v..][..d_v];
                for s in 0..=t {
                    let vs = &v.data()[(b * seq + s) * vw + h * d_v..][..d_v];
                    for d in 0..d_v {
                        dst[d] += row[s] * vs[d];
                    }
                }
            }
        }
    }

    let psi_q = q.map(|z| z.exp());
    let psi_k = k.map(|z| z.exp());
    let beta = Tensor::from_fn(&[batch, seq, heads], |i| {
        psi_q.data()[i * slots..(i + 1) * slots].iter().sum::<f64>()
    });
    let mut alpha = Tensor::<f64>::zeros(&[batch, seq, sw]);
    let mut vtilde = Tensor::<f64>::zeros(&[batch, seq, sw, d_v]);
    for b in 0..batch {
        for c in 0..sw {
            let h = c / slots;
            let mut a = 0.0;
            let mut acc = vec![0.0; d_v];
            for t in 0..seq {
                let e = psi_k.data()[(b * seq + t) * sw + c];
                a += e;
                let vs = &v.data()[(b * seq + t) * vw + h * d_v..][..d_v];
                for d in 0..d_v {
                    acc[d] += e * vs[d];
                }
                alpha.data_mut()[(b * seq + t) * sw + c] = a;
                vtilde.data_mut()[((b * seq + t) * sw + c) * d_v..][..d_v].copy_from_slice(&acc);
            }
        }
    }
    let gamma = Tensor::<f64>::from_fn(&[batch, seq, sw], |i| {
        let h = (i % sw) / slots;
        psi_q.data()[i] / (beta.data()[(i / sw) * heads + h] * alpha.data()[i])
    });
    let out = to_batch(dims, out)?;
    let trace = LatteTrace {
        psi_q: psi_q.cast(),
        psi_k: psi_k.cast(),
        beta: beta.cast(),
        alpha: alpha.cast(),
        gamma: gamma.cast(),
        vtilde: vtilde.cast(),
        probs: AttentionMatrix {
            probs: Tensor::new(vec![batch, heads, seq, seq], probs)?.cast(),
        },
    };
    Ok((
        SequenceBatch::new(out.into_values().cast())?,
        trace,
    ))
}

/// Stabilized causal scan. `unroll` must be positive and only changes loop
/// blocking.
pub fn latte_causal_scan<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &LatteParams<T>,
    unroll: usize,
) -> Result<SequenceBatch<T>> {
    if unroll == 0 {
        return Err(LatteError::InvalidArgument("unroll must be positive".into()));
    }
    let Projected { q, k, v, dims } = projections(x, params)?;
    let mut probs = q.into_data();
    head_softmax(&mut probs, dims.slots);
    let out = latent_scan(&probs, k.data(), v.data(), dims, unroll);
    to_batch(dims, out)
}

/// The causal recursion evaluated literally, with unshifted exponentials:
/// `out_t = sum_l exp(q_tl) / (beta_t alpha_tl) * vtilde_tl`. Fails with
/// [`LatteError::NonFinite`] as soon as an intermediate overflows. Kept as
/// the unstabilized counterpart of [`latte_causal_scan`].
pub fn latte_causal_scan_unshifted<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &LatteParams<T>,
) -> Result<SequenceBatch<T>> {
    let Projected { q, k, v, dims } = projections(x, params)?;
    let ScanDims {
        batch,
        seq,
        heads,
        slots,
        d_v,
    } = dims;
    let (sw, vw) = (dims.slot_width(), dims.value_width());
    let overflow = |what: &str, t: usize| LatteError::NonFinite(format!("{what} at step {t}"));
    let mut out = vec![T::zero(); batch * seq * vw];
    for b in 0..batch {
        for h in 0..heads {
            let mut alpha = vec![T::zero(); slots];
            let mut vt = vec![T::zero(); slots * d_v];
            for t in 0..seq {
                let row = (b * seq + t) * sw + h * slots;
                let vs = &v.data()[(b * seq + t) * vw + h * d_v..][..d_v];
                let mut beta = T::zero();
                for l in 0..slots {
                    let e = k.data()[row + l].exp();
                    alpha[l] += e;
                    for d in 0..d_v {
                        vt[l * d_v + d] += e * vs[d];
                    }
                    beta += q.data()[row + l].exp();
                }
                let dst = &mut out[(b * seq + t) * vw + h * d_v..][..d_v];
                for l in 0..slots {
                    let denom = beta * alpha[l];
                    if !denom.is_finite() {
                        return Err(overflow("normalizer", t));
                    }
                    let gamma = q.data()[row + l].exp() / denom;
                    for d in 0..d_v {
                        dst[d] += gamma * vt[l * d_v + d];
                    }
                }
                if dst.iter().any(|o| !o.is_finite()) {
                    return Err(overflow("output", t));
                }
            }
        }
    }
    to_batch(dims, out)
}

/// One streaming step: absorb `x_t` (`[B, D]`) and return `[B, Dv]`.
pub fn latte_step<T: Scalar>(
    mut state: LatteState<T>,
    x_t: &Tensor<T>,
    params: &LatteParams<T>,
) -> Result<(LatteState<T>, Tensor<T>)> {
    params.validate()?;
    x_t.expect_rank(2, "streaming input")?;
    let batch = x_t.dim(0);
    let dims = params.scan_dims(batch, 1);
    state
        .alpha_shifted
        .expect_shape(&[batch, dims.heads, dims.slots])?;
    state
        .vtilde_shifted
        .expect_shape(&[batch, dims.heads, dims.slots, dims.d_v])?;
    state
        .running_max
        .expect_shape(&[batch, dims.heads, dims.slots])?;
    let x3 = SequenceBatch::new(x_t.clone().reshape(&[batch, 1, params.d_model()])?)?;
    let Projected { q, k, v, .. } = projections(&x3, params)?;
    let mut probs = q.into_data();
    head_softmax(&mut probs, dims.slots);
    let (sw, vw) = (dims.slot_width(), dims.value_width());
    let mut out = Tensor::zeros(&[batch, vw]);
    let first = state.t == 0;
    for b in 0..batch {
        for h in 0..dims.heads {
            let bh = b * dims.heads + h;
            let sl = bh * dims.slots..(bh + 1) * dims.slots;
            let ks = b * sw + h * dims.slots..b * sw + (h + 1) * dims.slots;
            let vs = b * vw + h * dims.d_v..b * vw + (h + 1) * dims.d_v;
            scan_step(
                &mut state.alpha_shifted.data_mut()[sl.clone()],
                &mut state.vtilde_shifted.data_mut()
                    [bh * dims.slots * dims.d_v..(bh + 1) * dims.slots * dims.d_v],
                &mut state.running_max.data_mut()[sl],
                &k.data()[ks.clone()],
                &v.data()[vs.clone()],
                &probs[ks],
                &mut out.data_mut()[vs],
                first,
            );
        }
    }
    state.t += 1;
    Ok((state, out))
}

/// `p(l | t)` per head together with the entropy of each head's average
/// slot usage.
#[derive(Debug, Clone)]
pub struct LatentPosterior<T> {
    /// `[B, H, T, L/H]`.
    pub probs: Tensor<T>,
    /// `[B, H]`: `H(mean_t p(l | t))` in nats.
    pub usage_entropy: Tensor<T>,
}

pub fn latent_posterior<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &LatteParams<T>,
) -> Result<LatentPosterior<T>> {
    params.validate()?;
    let q = project(x, &params.w_q)?;
    let dims = params.scan_dims(x.batch(), x.seq_len());
    let ScanDims {
        batch,
        seq,
        heads,
        slots,
        ..
    } = dims;
    let mut flat = q.into_data();
    head_softmax(&mut flat, slots);
    let probs = Tensor::from_fn(&[batch, heads, seq, slots], |i| {
        let l = i % slots;
        let t = (i / slots) % seq;
        let h = (i / (slots * seq)) % heads;
        let b = i / (slots * seq * heads);
        flat[(b * seq + t) * heads * slots + h * slots + l]
    });
    let inv_t = T::one() / T::of(seq as f64);
    let usage_entropy = Tensor::from_fn(&[batch, heads], |bh| {
        let block = &probs.data()[bh * seq * slots..(bh + 1) * seq * slots];
        let mut ent = T::zero();
        for l in 0..slots {
            let m: T = (0..seq).map(|t| block[t * slots + l]).sum::<T>() * inv_t;
            if m > T::zero() {
                ent -= m * m.ln();
            }
        }
        ent
    });
    Ok(LatentPosterior {
        probs,
        usage_entropy,
    })
}

/// Dense `[B, T, L]` query logits; exposed for diagnostics.
pub fn query_logits<T: Scalar>(x: &SequenceBatch<T>, params: &LatteParams<T>) -> Result<Tensor<T>> {
    matmul(x.values(), &params.w_q)
}
