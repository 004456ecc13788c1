//! Multi-head masked softmax attention over already-projected inputs.
//!
//! Inputs use the `[B, T, H * d]` layout: heads are contiguous slices of the
//! last dimension. Causal and bidirectional masks go through a dense path
//! (`T x T` score matrices via gemm); narrow windows use a banded path that
//! only touches `w + 1` keys per query.

use crate::numerics::{gemm, Layout, Scalar};

use super::MaskMode;

/// Shape bookkeeping shared by the attention kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d_qk: usize,
    pub d_v: usize,
}

impl HeadDims {
    fn qk_stride(&self) -> usize {
        self.heads * self.d_qk
    }

    fn v_stride(&self) -> usize {
        self.heads * self.d_v
    }
}

/// Attention probabilities retained for the backward pass.
#[derive(Debug, Clone)]
pub enum Probs<T> {
    /// `[B, H, T, T]`.
    Dense(Vec<T>),
    /// `[B, H, T, w + 1]`; slot `j` of row `t` is key `t - w + j`.
    Band { window: usize, data: Vec<T> },
}

impl<T: Scalar> Probs<T> {
    /// Expand to a dense `[B, H, T, T]` buffer.
    pub fn to_dense(&self, dims: HeadDims) -> Vec<T> {
        match self {
            Probs::Dense(p) => p.clone(),
            Probs::Band { window, data } => {
                let (t_len, w) = (dims.seq, *window);
                let mut out = vec![T::zero(); dims.batch * dims.heads * t_len * t_len];
                for bh in 0..dims.batch * dims.heads {
                    for t in 0..t_len {
                        for j in 0..=w {
                            if t + j < w {
                                continue;
                            }
                            let s = t + j - w;
                            out[(bh * t_len + t) * t_len + s] =
                                data[(bh * t_len + t) * (w + 1) + j];
                        }
                    }
                }
                out
            }
        }
    }
}

/// Admissible key range `[lo, hi]` for query `t`.
#[inline]
pub fn support(mask: MaskMode, t: usize, seq: usize) -> (usize, usize) {
    match mask {
        MaskMode::Causal => (0, t),
        MaskMode::Bidirectional => (0, seq - 1),
        MaskMode::Window(w) => (t.saturating_sub(w), t),
    }
}

fn use_band(mask: MaskMode, seq: usize) -> Option<usize> {
    match mask {
        MaskMode::Window(w) if (w + 1) * 4 <= seq => Some(w),
        _ => None,
    }
}

fn gather<T: Scalar>(src: &[T], dims: HeadDims, b: usize, h: usize, width: usize, dst: &mut [T]) {
    let stride = dims.heads * width;
    for t in 0..dims.seq {
        let from = (b * dims.seq + t) * stride + h * width;
        dst[t * width..(t + 1) * width].copy_from_slice(&src[from..from + width]);
    }
}

fn scatter<T: Scalar>(src: &[T], dims: HeadDims, b: usize, h: usize, width: usize, dst: &mut [T]) {
    let stride = dims.heads * width;
    for t in 0..dims.seq {
        let to = (b * dims.seq + t) * stride + h * width;
        dst[to..to + width].copy_from_slice(&src[t * width..(t + 1) * width]);
    }
}

pub fn logit_scale<T: Scalar>(scaled: bool, d_qk: usize) -> T {
    if scaled && d_qk > 0 {
        T::one() / T::of(d_qk as f64).sqrt()
    } else {
        T::one()
    }
}

/// Forward pass. Returns `[B, T, H * d_v]` and, when requested, the
/// probabilities needed by [`attention_backward`].
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: HeadDims,
    mask: MaskMode,
    scaled: bool,
    keep_probs: bool,
) -> (Vec<T>, Option<Probs<T>>) {
    let scale = logit_scale::<T>(scaled, dims.d_qk);
    if let Some(w) = use_band(mask, dims.seq) {
        let (out, band) = banded_forward(q, k, v, dims, w, scale, keep_probs);
        return (out, band.map(|data| Probs::Band { window: w, data }));
    }
    let (bsz, t_len, heads) = (dims.batch, dims.seq, dims.heads);
    let mut out = vec![T::zero(); bsz * t_len * dims.v_stride()];
    let mut probs = if keep_probs {
        vec![T::zero(); bsz * heads * t_len * t_len]
    } else {
        Vec::new()
    };
    let mut qh = vec![T::zero(); t_len * dims.d_qk];
    let mut kh = vec![T::zero(); t_len * dims.d_qk];
    let mut vh = vec![T::zero(); t_len * dims.d_v];
    let mut oh = vec![T::zero(); t_len * dims.d_v];
    let mut scores = vec![T::zero(); t_len * t_len];
    for b in 0..bsz {
        for h in 0..heads {
            gather(q, dims, b, h, dims.d_qk, &mut qh);
            gather(k, dims, b, h, dims.d_qk, &mut kh);
            gather(v, dims, b, h, dims.d_v, &mut vh);
            gemm(
                &qh,
                Layout::plain(t_len, dims.d_qk),
                &kh,
                Layout::t(t_len, dims.d_qk),
                T::zero(),
                &mut scores,
            );
            for t in 0..t_len {
                let (lo, hi) = support(mask, t, t_len);
                let row = &mut scores[t * t_len..(t + 1) * t_len];
                let mut m = T::neg_infinity();
                for s in lo..=hi {
                    row[s] = row[s] * scale;
                    if row[s] > m {
                        m = row[s];
                    }
                }
                let mut z = T::zero();
                for s in lo..=hi {
                    row[s] = (row[s] - m).exp();
                    z += row[s];
                }
                let inv = T::one() / z;
                for (s, p) in row.iter_mut().enumerate() {
                    if s < lo || s > hi {
                        *p = T::zero();
                    } else {
                        *p = *p * inv;
                    }
                }
            }
            gemm(
                &scores,
                Layout::plain(t_len, t_len),
                &vh,
                Layout::plain(t_len, dims.d_v),
                T::zero(),
                &mut oh,
            );
            scatter(&oh, dims, b, h, dims.d_v, &mut out);
            if keep_probs {
                let at = (b * heads + h) * t_len * t_len;
                probs[at..at + t_len * t_len].copy_from_slice(&scores);
            }
        }
    }
    (out, keep_probs.then_some(Probs::Dense(probs)))
}

fn banded_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: HeadDims,
    w: usize,
    scale: T,
    keep_probs: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (bsz, t_len, heads, dq, dv) = (dims.batch, dims.seq, dims.heads, dims.d_qk, dims.d_v);
    let (qs, vs) = (dims.qk_stride(), dims.v_stride());
    let mut out = vec![T::zero(); bsz * t_len * vs];
    let mut band = if keep_probs {
        vec![T::zero(); bsz * heads * t_len * (w + 1)]
    } else {
        Vec::new()
    };
    let mut p = vec![T::zero(); w + 1];
    for b in 0..bsz {
        for h in 0..heads {
            for t in 0..t_len {
                let lo = t.saturating_sub(w);
                let qt = &q[(b * t_len + t) * qs + h * dq..][..dq];
                let mut m = T::neg_infinity();
                for s in lo..=t {
                    let ks = &k[(b * t_len + s) * qs + h * dq..][..dq];
                    let mut acc = T::zero();
                    for i in 0..dq {
                        acc += qt[i] * ks[i];
                    }
                    let sc = acc * scale;
                    p[s - lo] = sc;
                    if sc > m {
                        m = sc;
                    }
                }
                let n = t - lo + 1;
                let mut z = T::zero();
                for pj in p.iter_mut().take(n) {
                    *pj = (*pj - m).exp();
                    z += *pj;
                }
                let inv = T::one() / z;
                let o = &mut out[(b * t_len + t) * vs + h * dv..][..dv];
                for s in lo..=t {
                    let pj = p[s - lo] * inv;
                    p[s - lo] = pj;
                    let vsr = &v[(b * t_len + s) * vs + h * dv..][..dv];
                    for i in 0..dv {
                        o[i] += pj * vsr[i];
                    }
                }
                if keep_probs {
                    let row = &mut band[((b * heads + h) * t_len + t) * (w + 1)..][..w + 1];
                    for s in lo..=t {
                        row[s + w - t] = p[s - lo];
                    }
                }
            }
        }
    }
    (out, keep_probs.then_some(band))
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &Probs<T>,
    grad_out: &[T],
    dims: HeadDims,
    scaled: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = logit_scale::<T>(scaled, dims.d_qk);
    match probs {
        Probs::Dense(p) => dense_backward(q, k, v, p, grad_out, dims, scale),
        Probs::Band { window, data } => {
            banded_backward(q, k, v, *window, data, grad_out, dims, scale)
        }
    }
}

fn dense_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    dims: HeadDims,
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (bsz, t_len, heads, dq, dv) = (dims.batch, dims.seq, dims.heads, dims.d_qk, dims.d_v);
    let mut dq_all = vec![T::zero(); q.len()];
    let mut dk_all = vec![T::zero(); k.len()];
    let mut dv_all = vec![T::zero(); v.len()];
    let mut qh = vec![T::zero(); t_len * dq];
    let mut kh = vec![T::zero(); t_len * dq];
    let mut vh = vec![T::zero(); t_len * dv];
    let mut goh = vec![T::zero(); t_len * dv];
    let mut dp = vec![T::zero(); t_len * t_len];
    let mut tmp_qk = vec![T::zero(); t_len * dq];
    let mut tmp_v = vec![T::zero(); t_len * dv];
    for b in 0..bsz {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * t_len * t_len..][..t_len * t_len];
            gather(q, dims, b, h, dq, &mut qh);
            gather(k, dims, b, h, dq, &mut kh);
            gather(v, dims, b, h, dv, &mut vh);
            gather(grad_out, dims, b, h, dv, &mut goh);
            // dV = P^T dO
            gemm(
                p,
                Layout::t(t_len, t_len),
                &goh,
                Layout::plain(t_len, dv),
                T::zero(),
                &mut tmp_v,
            );
            scatter(&tmp_v, dims, b, h, dv, &mut dv_all);
            // dP = dO V^T
            gemm(
                &goh,
                Layout::plain(t_len, dv),
                &vh,
                Layout::t(t_len, dv),
                T::zero(),
                &mut dp,
            );
            for t in 0..t_len {
                let prow = &p[t * t_len..(t + 1) * t_len];
                let drow = &mut dp[t * t_len..(t + 1) * t_len];
                let mut inner = T::zero();
                for s in 0..t_len {
                    inner += prow[s] * drow[s];
                }
                for s in 0..t_len {
                    drow[s] = prow[s] * (drow[s] - inner) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm(
                &dp,
                Layout::plain(t_len, t_len),
                &kh,
                Layout::plain(t_len, dq),
                T::zero(),
                &mut tmp_qk,
            );
            scatter(&tmp_qk, dims, b, h, dq, &mut dq_all);
            gemm(
                &dp,
                Layout::t(t_len, t_len),
                &qh,
                Layout::plain(t_len, dq),
                T::zero(),
                &mut tmp_qk,
            );
            scatter(&tmp_qk, dims, b, h, dq, &mut dk_all);
        }
    }
    (dq_all, dk_all, dv_all)
}

#[allow(clippy::too_many_arguments)]
fn banded_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    w: usize,
    band: &[T],
    grad_out: &[T],
    dims: HeadDims,
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (bsz, t_len, heads, dq, dv) = (dims.batch, dims.seq, dims.heads, dims.d_qk, dims.d_v);
    let (qs, vs) = (dims.qk_stride(), dims.v_stride());
    let mut dq_all = vec![T::zero(); q.len()];
    let mut dk_all = vec![T::zero(); k.len()];
    let mut dv_all = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); w + 1];
    for b in 0..bsz {
        for h in 0..heads {
            for t in 0..t_len {
                let lo = t.saturating_sub(w);
                let prow = &band[((b * heads + h) * t_len + t) * (w + 1)..][..w + 1];
                let go = &grad_out[(b * t_len + t) * vs + h * dv..][..dv];
                let mut inner = T::zero();
                for s in lo..=t {
                    let j = s + w - t;
                    let vsr = &v[(b * t_len + s) * vs + h * dv..][..dv];
                    let mut acc = T::zero();
                    for i in 0..dv {
                        acc += go[i] * vsr[i];
                    }
                    dp[j] = acc;
                    inner += prow[j] * acc;
                    let dvs = &mut dv_all[(b * t_len + s) * vs + h * dv..][..dv];
                    for i in 0..dv {
                        dvs[i] += prow[j] * go[i];
                    }
                }
                let qt_at = (b * t_len + t) * qs + h * dq;
                for s in lo..=t {
                    let j = s + w - t;
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    let ks_at = (b * t_len + s) * qs + h * dq;
                    for i in 0..dq {
                        dq_all[qt_at + i] += ds * k[ks_at + i];
                        dk_all[ks_at + i] += ds * q[qt_at + i];
                    }
                }
            }
        }
    }
    (dq_all, dk_all, dv_all)
}

/// Rotate channel pairs `(2i, 2i+1)` of every head by `pos * base^(-2i/d)`.
///
/// `data` is `[B, T, H * d]`; `positions[t]` is the absolute position of
/// step `t`. `inverse` applies the opposite rotation (the adjoint).
pub fn rope_in_place<T: Scalar>(
    data: &mut [T],
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
    positions: &[usize],
    inverse: bool,
) {
    debug_assert!(d % 2 == 0);
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / d as f64))
        .collect();
    for t in 0..seq {
        let pos = positions[t] as f64;
        let rot: Vec<(T, T)> = freqs
            .iter()
            .map(|f| {
                let a = pos * f;
                let s = if inverse { -a.sin() } else { a.sin() };
                (T::of(a.cos()), T::of(s))
            })
            .collect();
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * seq + t) * heads * d + h * d;
                for (i, &(c, s)) in rot.iter().enumerate() {
                    let x0 = data[base + 2 * i];
                    let x1 = data[base + 2 * i + 1];
                    data[base + 2 * i] = x0 * c - x1 * s;
                    data[base + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

pub const ROPE_BASE: f64 = 10000.0;
