//! Reverse-mode tape over coarse tensor operations.
//!
//! Every op pushes its value and, when recording, a closure mapping the
//! output gradient to contributions for its inputs. Inputs are addressed by
//! node index; closures read input values from the tape at backward time and
//! keep any extra cache (probabilities, masks, recurrences) they captured.

use std::collections::BTreeMap;

use latte::attention::kernel::{attention_backward, attention_forward, rope_in_place, HeadDims};
use latte::latte::kernel::{head_softmax, head_softmax_backward, latent_scan, latent_scan_backward, ScanDims};
use latte::linear::{linear_recurrent_backward, linear_recurrent_kernel, LinearDims};
use latte::macchiato::kernel::{
    causal_conv, causal_conv_backward, pack_gate, rglru_scan, rglru_scan_backward, unpack_gate,
};
use latte::numerics::{gemm, sigmoid, Layout};
use latte::{LatteError, MaskMode, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

type Backward<T> = Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<(usize, Vec<T>)>>;

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    backs: Vec<Option<Backward<T>>>,
    params: Vec<(String, usize)>,
    recording: bool,
}

/// Parameter gradients keyed by name.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Side information for the per-head attention op.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSpec {
    pub dims: HeadDims,
    pub mask: MaskMode,
    pub scaled: bool,
    pub rope: bool,
}

/// Side information for the fused hybrid op.
#[derive(Debug, Clone, Copy)]
pub struct MixtureSpec {
    pub local: AttentionSpec,
    pub slots: usize,
    pub unroll: usize,
}

fn rope<T: Scalar>(data: &mut [T], dims: HeadDims, inverse: bool) {
    let positions: Vec<usize> = (0..dims.seq).collect();
    rope_in_place(data, dims.batch, dims.seq, dims.heads, dims.d_qk, &positions, inverse);
}

impl<T: Scalar> Tape<T> {
    pub fn new(recording: bool) -> Self {
        Self {
            values: Vec::new(),
            backs: Vec::new(),
            params: Vec::new(),
            recording,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor<T>, back: Option<Backward<T>>) -> Var {
        self.values.push(value);
        self.backs.push(if self.recording { back } else { None });
        Var(self.values.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.push(value, None);
        self.params.push((name.to_string(), v.0));
        v
    }

    /// Gradients of the scalar `loss` for every named parameter, with the
    /// output gradient seeded to `seed`.
    pub fn backward(&self, loss: Var, seed: T) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(LatteError::InvalidArgument("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(back) = &self.backs[i] else { continue };
            let Some(g) = grads[i].take() else { continue };
            for (p, contrib) in back(&g, &self.values) {
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        let mut by_name = BTreeMap::new();
        for (name, idx) in &self.params {
            let shape = self.values[*idx].shape().to_vec();
            let g = grads[*idx]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.values[*idx].len()]);
            by_name.insert(name.clone(), Tensor::new(shape, g)?);
        }
        Ok(Gradients { by_name })
    }

    /// `x [.., K] * w [K, N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = latte::numerics::matmul(self.value(x), self.value(w))?;
        let (xi, wi) = (x.0, w.0);
        let (k, n) = (self.value(w).dim(0), self.value(w).dim(1));
        let rows = self.value(x).len() / k.max(1);
        let back: Backward<T> = Box::new(move |g, vals| {
            let mut dx = vec![T::zero(); rows * k];
            gemm(g, Layout::plain(rows, n), vals[wi].data(), Layout::t(k, n), T::zero(), &mut dx);
            let mut dw = vec![T::zero(); k * n];
            gemm(vals[xi].data(), Layout::t(rows, k), g, Layout::plain(rows, n), T::zero(), &mut dw);
            vec![(xi, dx), (wi, dw)]
        });
        Ok(self.push(out, Some(back)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let xi = x.0;
        let back: Backward<T> = Box::new(move |g, _| vec![(xi, g.to_vec())]);
        Ok(self.push(out, Some(back)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let (ai, bi) = (a.0, b.0);
        let back: Backward<T> = Box::new(move |g, _| vec![(ai, g.to_vec()), (bi, g.to_vec())]);
        Ok(self.push(out, Some(back)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        let xi = x.0;
        let back: Backward<T> = Box::new(move |g, _| vec![(xi, g.iter().map(|&v| v * s).collect())]);
        self.push(out, Some(back))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(gain).len();
        let xv = self.value(x);
        if xv.shape().last() != Some(&d) {
            return Err(LatteError::Shape(format!("rms_norm gain {d} vs input {:?}", xv.shape())));
        }
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let rows = xv.len() / d;
        let mut inv_rms = vec![T::zero(); rows];
        let gv = self.value(gain).data();
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let ms: T = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let ir = T::one() / (ms + eps).sqrt();
            inv_rms[r] = ir;
            for j in 0..d {
                out[r * d + j] = row[j] * ir * gv[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let (xi, gi) = (x.0, gain.0);
        let back: Backward<T> = Box::new(move |g, vals| {
            let xd = vals[xi].data();
            let gv = vals[gi].data();
            let mut dx = vec![T::zero(); xd.len()];
            let mut dg = vec![T::zero(); d];
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let ir = inv_rms[r];
                let mut dot = T::zero();
                for j in 0..d {
                    dot += gr[j] * gv[j] * row[j];
                    dg[j] += gr[j] * row[j] * ir;
                }
                let c = dot * ir * ir * ir * inv_d;
                for j in 0..d {
                    dx[r * d + j] = gr[j] * gv[j] * ir - row[j] * c;
                }
            }
            vec![(xi, dx), (gi, dg)]
        });
        Ok(self.push(out, Some(back)))
    }

    /// Row-wise layer normalization with gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(gain).len();
        let xv = self.value(x);
        if xv.shape().last() != Some(&d) || self.value(bias).len() != d {
            return Err(LatteError::Shape(format!("layer_norm width {d} vs input {:?}", xv.shape())));
        }
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * is;
            }
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv[i % d] + bv[i % d])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let (xi, gi, bi) = (x.0, gain.0, bias.0);
        let back: Backward<T> = Box::new(move |g, vals| {
            let gv = vals[gi].data();
            let mut dx = vec![T::zero(); xhat.len()];
            let mut dg = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            for r in 0..rows {
                let h = &xhat[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..d {
                    let dh = gr[j] * gv[j];
                    s1 += dh;
                    s2 += dh * h[j];
                    dg[j] += gr[j] * h[j];
                    db[j] += gr[j];
                }
                for j in 0..d {
                    let dh = gr[j] * gv[j];
                    dx[r * d + j] = inv_std[r] * (dh - s1 * inv_d - h[j] * s2 * inv_d);
                }
            }
            vec![(xi, dx), (gi, dg), (bi, db)]
        });
        Ok(self.push(out, Some(back)))
    }

    /// `silu(a) * b`.
    pub fn swiglu(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * sigmoid(x) * y)?;
        let (ai, bi) = (a.0, b.0);
        let back: Backward<T> = Box::new(move |g, vals| {
            let (av, bv) = (vals[ai].data(), vals[bi].data());
            let mut da = vec![T::zero(); av.len()];
            let mut db = vec![T::zero(); av.len()];
            for i in 0..av.len() {
                let s = sigmoid(av[i]);
                let silu = av[i] * s;
                db[i] = g[i] * silu;
                da[i] = g[i] * bv[i] * s * (T::one() + av[i] * (T::one() - s));
            }
            vec![(ai, da), (bi, db)]
        });
        Ok(self.push(out, Some(back)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of(0.044715);
        let half = T::of(0.5);
        let f = move |v: T| half * v * (T::one() + (c * (v + k * v * v * v)).tanh());
        let out = self.value(x).map(f);
        let xi = x.0;
        let three = T::of(3.0);
        let back: Backward<T> = Box::new(move |g, vals| {
            let xv = vals[xi].data();
            let dx = xv
                .iter()
                .zip(g)
                .map(|(&v, &gv)| {
                    let u = c * (v + k * v * v * v);
                    let th = u.tanh();
                    let du = c * (T::one() + three * k * v * v);
                    gv * (half * (T::one() + th) + half * v * (T::one() - th * th) * du)
                })
                .collect();
            vec![(xi, dx)]
        });
        self.push(out, Some(back))
    }

    /// Multiply by a fixed keep-mask scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, keep: Vec<bool>, rate: f64) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(LatteError::Shape("dropout mask length".into()));
        }
        let s = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = keep.iter().map(|&k| if k { s } else { T::zero() }).collect();
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        )?;
        let xi = x.0;
        let back: Backward<T> = Box::new(move |g, _| {
            vec![(xi, g.iter().zip(&mask).map(|(&a, &m)| a * m).collect())]
        });
        Ok(self.push(out, Some(back)))
    }

    /// Rows of `table` selected by `ids`, shaped `[shape.., D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.dim(0), tv.dim(1));
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(LatteError::TokenOutOfRange { id, vocab: rows });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut full_shape = shape.to_vec();
        full_shape.push(d);
        let out = Tensor::new(full_shape, out)?;
        let ti = table.0;
        let ids = ids.to_vec();
        let back: Backward<T> = Box::new(move |g, _| {
            let mut dt = vec![T::zero(); rows * d];
            for (n, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += g[n * d + j];
                }
            }
            vec![(ti, dt)]
        });
        Ok(self.push(out, Some(back)))
    }

    /// Mean cross-entropy over positions with `mask[i]`; zero when nothing
    /// is selected.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let v = *lv.shape().last().unwrap_or(&0);
        let rows = lv.len() / v.max(1);
        if targets.len() != rows || mask.len() != rows {
            return Err(LatteError::Shape("cross-entropy targets/mask length".into()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut probs = vec![T::zero(); if self.recording { lv.len() } else { 0 }];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(LatteError::TokenOutOfRange { id: targets[r], vocab: v });
            }
            let row = &lv.data()[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[targets[r]];
            if self.recording {
                for j in 0..v {
                    probs[r * v + j] = (row[j] - lse).exp();
                }
            }
        }
        let denom = T::of(count.max(1) as f64);
        let loss = if count == 0 { T::zero() } else { total / denom };
        let li = logits.0;
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        let back: Backward<T> = Box::new(move |g, _| {
            let mut d = vec![T::zero(); rows * v];
            if count > 0 {
                let s = g[0] / denom;
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    for j in 0..v {
                        d[r * v + j] = probs[r * v + j] * s;
                    }
                    d[r * v + targets[r]] -= s;
                }
            }
            vec![(li, d)]
        });
        Ok(self.push(Tensor::scalar(loss), Some(back)))
    }

    /// Multi-head softmax attention over `[B, T, H * d]` projections, with
    /// optional rotary encoding of queries and keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let dims = spec.dims;
        let mut qd = self.value(q).data().to_vec();
        let mut kd = self.value(k).data().to_vec();
        if spec.rope {
            rope(&mut qd, dims, false);
            rope(&mut kd, dims, false);
        }
        let (out, probs) =
            attention_forward(&qd, &kd, self.value(v).data(), dims, spec.mask, spec.scaled, self.recording);
        let out = Tensor::new(vec![dims.batch, dims.seq, dims.heads * dims.d_v], out)?;
        let (qi, ki, vi) = (q.0, k.0, v.0);
        let back: Option<Backward<T>> = probs.map(|probs| {
            Box::new(move |g: &[T], vals: &[Tensor<T>]| {
                let (mut dq, mut dk, dv) =
                    attention_backward(&qd, &kd, vals[vi].data(), &probs, g, dims, spec.scaled);
                if spec.rope {
                    rope(&mut dq, dims, true);
                    rope(&mut dk, dims, true);
                }
                vec![(qi, dq), (ki, dk), (vi, dv)]
            }) as Backward<T>
        });
        Ok(self.push(out, back))
    }

    /// Causal latent attention from raw query logits (softmaxed per head),
    /// key logits and values.
    pub fn latent_attention(&mut self, q_logits: Var, k_logits: Var, v: Var, dims: ScanDims, unroll: usize) -> Result<Var> {
        let mut probs = self.value(q_logits).data().to_vec();
        head_softmax(&mut probs, dims.slots);
        let out = latent_scan(&probs, self.value(k_logits).data(), self.value(v).data(), dims, unroll);
        let out = Tensor::new(vec![dims.batch, dims.seq, dims.value_width()], out)?;
        let (qi, ki, vi) = (q_logits.0, k_logits.0, v.0);
        let back: Backward<T> = Box::new(move |g, vals| {
            let (dp, dk, dv) =
                latent_scan_backward(&probs, vals[ki].data(), vals[vi].data(), g, dims);
            let dq = head_softmax_backward(&probs, &dp, dims.slots);
            vec![(qi, dq), (ki, dk), (vi, dv)]
        });
        Ok(self.push(out, Some(back)))
    }

    /// Linear attention with `exp` features, unshifted running sums.
    pub fn linear_attention(&mut self, q_logits: Var, k_logits: Var, v: Var, dims: LinearDims) -> Result<Var> {
        let out = linear_recurrent_kernel(
            self.value(q_logits).data(),
            self.value(k_logits).data(),
            self.value(v).data(),
            dims,
        )?;
        let out_t = Tensor::new(vec![dims.batch, dims.seq, dims.heads * dims.d_v], out.clone())?;
        let (qi, ki, vi) = (q_logits.0, k_logits.0, v.0);
        let back: Backward<T> = Box::new(move |g, vals| {
            let (dq, dk, dv) = linear_recurrent_backward(
                vals[qi].data(),
                vals[ki].data(),
                vals[vi].data(),
                &out,
                g,
                dims,
            );
            vec![(qi, dq), (ki, dk), (vi, dv)]
        });
        Ok(self.push(out_t, Some(back)))
    }

    /// Causal convolution of `[B, T, D]` with `[K, D]` (depthwise) or
    /// `[K, D, D]` weights.
    pub fn causal_conv(&mut self, x: Var, w: Var, depthwise: bool) -> Result<Var> {
        let xv = self.value(x);
        let (b, t, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let taps = self.value(w).dim(0);
        let out = causal_conv(xv.data(), self.value(w).data(), b, t, d, taps, depthwise);
        let out = Tensor::new(vec![b, t, d], out)?;
        let (xi, wi) = (x.0, w.0);
        let back: Backward<T> = Box::new(move |g, vals| {
            let (dx, dw) =
                causal_conv_backward(vals[xi].data(), vals[wi].data(), g, b, t, d, taps, depthwise);
            vec![(xi, dx), (wi, dw)]
        });
        Ok(self.push(out, Some(back)))
    }

    /// Gated linear recurrence; `rec_pre` and `in_pre` are gate
    /// pre-activations, `log_decay` is `[D]`.
    pub fn rglru(&mut self, x: Var, rec_pre: Var, in_pre: Var, log_decay: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, t, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let cache = rglru_scan(
            xv.data(),
            self.value(rec_pre).data(),
            self.value(in_pre).data(),
            self.value(log_decay).data(),
            b,
            t,
            d,
        );
        let out = Tensor::new(vec![b, t, d], cache.h.clone())?;
        let (xi, ri, ii, li) = (x.0, rec_pre.0, in_pre.0, log_decay.0);
        let back: Backward<T> = Box::new(move |g, vals| {
            let (dx, dr, di, dl) =
                rglru_scan_backward(vals[xi].data(), vals[li].data(), &cache, g, b, t, d);
            vec![(xi, dx), (ri, dr), (ii, di), (li, dl)]
        });
        Ok(self.push(out, Some(back)))
    }

    /// Hybrid mixer core. `local_logit` is `[B, T, H]`, `latent_logits` and
    /// `k_latent` are `[B, T, H * slots]`, `q_local`/`k_local` the local
    /// branch projections and `v` the shared values.
    #[allow(clippy::too_many_arguments)]
    pub fn mixture(
        &mut self,
        local_logit: Var,
        latent_logits: Var,
        k_latent: Var,
        q_local: Var,
        k_local: Var,
        v: Var,
        spec: MixtureSpec,
    ) -> Result<Var> {
        let dims = spec.local.dims;
        let (heads, slots, d_v) = (dims.heads, spec.slots, dims.d_v);
        let rows = dims.batch * dims.seq;
        let mut gate = pack_gate(
            self.value(local_logit).data(),
            self.value(latent_logits).data(),
            rows,
            heads,
            slots,
        );
        head_softmax(&mut gate, slots + 1);
        let (g0, g_rest) = unpack_gate(&gate, rows, heads, slots);

        let mut qd = self.value(q_local).data().to_vec();
        let mut kd = self.value(k_local).data().to_vec();
        if spec.local.rope {
            rope(&mut qd, dims, false);
            rope(&mut kd, dims, false);
        }
        let vd = self.value(v).data();
        let (local, probs) = attention_forward(
            &qd,
            &kd,
            vd,
            dims,
            spec.local.mask,
            spec.local.scaled,
            self.recording,
        );
        let sdims = ScanDims {
            batch: dims.batch,
            seq: dims.seq,
            heads,
            slots,
            d_v,
        };
        let mut out = latent_scan(&g_rest, self.value(k_latent).data(), vd, sdims, spec.unroll);
        let vw = heads * d_v;
        for r in 0..rows {
            for h in 0..heads {
                let g = g0[r * heads + h];
                for j in 0..d_v {
                    let at = r * vw + h * d_v + j;
                    out[at] = g * local[at] + out[at];
                }
            }
        }
        let out = Tensor::new(vec![dims.batch, dims.seq, vw], out)?;
        let (zi, qli, kli, qi, ki, vi) = (
            local_logit.0,
            latent_logits.0,
            k_latent.0,
            q_local.0,
            k_local.0,
            v.0,
        );
        let back: Option<Backward<T>> = probs.map(|probs| {
            Box::new(move |g: &[T], vals: &[Tensor<T>]| {
                let vd = vals[vi].data();
                let mut d_local = vec![T::zero(); g.len()];
                let mut dg0 = vec![T::zero(); rows * heads];
                for r in 0..rows {
                    for h in 0..heads {
                        let gate0 = g0[r * heads + h];
                        let mut acc = T::zero();
                        for j in 0..d_v {
                            let at = r * vw + h * d_v + j;
                            d_local[at] = gate0 * g[at];
                            acc += g[at] * local[at];
                        }
                        dg0[r * heads + h] = acc;
                    }
                }
                let (dg_rest, dk_lat, mut dv) =
                    latent_scan_backward(&g_rest, vals[kli].data(), vd, g, sdims);
                let (mut dq, mut dk, dv_local) =
                    attention_backward(&qd, &kd, vd, &probs, &d_local, dims, spec.local.scaled);
                if spec.local.rope {
                    rope(&mut dq, dims, true);
                    rope(&mut dk, dims, true);
                }
                for (a, b) in dv.iter_mut().zip(dv_local) {
                    *a += b;
                }
                let dgate = pack_gate(&dg0, &dg_rest, rows, heads, slots);
                let dlogits = head_softmax_backward(&gate, &dgate, slots + 1);
                let (dz0, dzq) = unpack_gate(&dlogits, rows, heads, slots);
                vec![(zi, dz0), (qli, dzq), (kli, dk_lat), (qi, dq), (ki, dk), (vi, dv)]
            }) as Backward<T>
        });
        Ok(self.push(out, back))
    }
}
