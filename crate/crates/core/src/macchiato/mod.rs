//! Hybrid mixer: a normalized mixture of sliding-window softmax attention
//! (local slot `0`) and causal latent attention (slots `1..=L`).
//!
//! The gate is one softmax per head over `L/H + 1` logits, the first coming
//! from a dedicated gate column. Latent logits may be computed from the raw
//! input, a short causal convolution of it, or a gated linear recurrence, so
//! that the latent branch sees position information.

pub mod kernel;

use crate::attention::kernel::{attention_forward, rope_in_place, HeadDims};
use crate::attention::{project, AttentionMatrix, AttentionParams, MaskMode, SequenceBatch};
use crate::error::{shape_err, LatteError, Result};
use crate::latte::kernel::{head_softmax, latent_scan, ScanDims};
use crate::latte::{LatteParams, DEFAULT_UNROLL};
use crate::numerics::{matmul, Scalar, Tensor};
use kernel::{causal_conv, pack_gate, rglru_scan, unpack_gate};
use rand::Rng;

pub use kernel::RGLRU_SHARPNESS;

/// Default convolution length.
pub const DEFAULT_CONV_TAPS: usize = 3;

#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    /// `[K, D]` when depthwise, else `[K, D, D]`.
    pub weights: Tensor<T>,
    pub depthwise: bool,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, depthwise: bool) -> Result<Self> {
        let rank = if depthwise { 2 } else { 3 };
        weights.expect_rank(rank, "convolution weights")?;
        if weights.dim(0) == 0 {
            return Err(LatteError::InvalidArgument("convolution needs at least one tap".into()));
        }
        if !depthwise && weights.dim(1) != weights.dim(2) {
            return Err(shape_err("full convolution weights must be square per tap"));
        }
        Ok(Self { weights, depthwise })
    }

    /// Identity on tap 0, zero elsewhere.
    pub fn identity(taps: usize, width: usize, depthwise: bool) -> Result<Self> {
        let w = if depthwise {
            Tensor::from_fn(&[taps, width], |i| if i < width { T::one() } else { T::zero() })
        } else {
            Tensor::from_fn(&[taps, width, width], |i| {
                if i < width * width && i / width == i % width {
                    T::one()
                } else {
                    T::zero()
                }
            })
        };
        Self::new(w, depthwise)
    }

    pub fn random<R: Rng + ?Sized>(
        taps: usize,
        width: usize,
        depthwise: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let shape: Vec<usize> = if depthwise {
            vec![taps, width]
        } else {
            vec![taps, width, width]
        };
        Self::new(Tensor::randn(&shape, std, rng), depthwise)
    }

    pub fn taps(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn width(&self) -> usize {
        self.weights.dim(1)
    }
}

#[derive(Debug, Clone)]
pub struct RglruParams<T> {
    /// `[D, D]`.
    pub w_input_gate: Tensor<T>,
    /// `[D, D]`.
    pub w_rec_gate: Tensor<T>,
    /// `[D]`; the base decay is `sigmoid(log_decay)`.
    pub log_decay: Tensor<T>,
}

impl<T: Scalar> RglruParams<T> {
    pub fn new(w_input_gate: Tensor<T>, w_rec_gate: Tensor<T>, log_decay: Tensor<T>) -> Result<Self> {
        w_input_gate.expect_rank(2, "input gate")?;
        let d = w_input_gate.dim(0);
        w_input_gate.expect_shape(&[d, d])?;
        w_rec_gate.expect_shape(&[d, d])?;
        log_decay.expect_shape(&[d])?;
        Ok(Self {
            w_input_gate,
            w_rec_gate,
            log_decay,
        })
    }

    /// Gates drawn with the given std; decays placed so that
    /// `sigmoid(log_decay)^c` is uniform in `[0.9, 0.999]`.
    pub fn random<R: Rng + ?Sized>(width: usize, std: f64, rng: &mut R) -> Result<Self> {
        let w_in = Tensor::randn(&[width, width], std, rng);
        let w_rec = Tensor::randn(&[width, width], std, rng);
        let lam = Tensor::from_fn(&[width], |_| {
            let target: f64 = rng.gen_range(0.9..0.999);
            let a = target.powf(1.0 / RGLRU_SHARPNESS);
            T::of((a / (1.0 - a)).ln())
        });
        Self::new(w_in, w_rec, lam)
    }

    pub fn width(&self) -> usize {
        self.log_decay.len()
    }
}

/// Source of the latent-branch features.
#[derive(Debug, Clone)]
pub enum FeatureMode<T> {
    Direct,
    Conv(ConvParams<T>),
    Rglru(RglruParams<T>),
}

#[derive(Debug, Clone)]
pub struct MacchiatoParams<T> {
    /// Latent branch; its `w_v` also feeds the local branch when
    /// `share_values` is set.
    pub latte: LatteParams<T>,
    /// `[D, H]`: column `h` gives head `h`'s local-slot logit.
    pub gate_row_0: Tensor<T>,
    /// Local branch projections.
    pub swa: AttentionParams<T>,
    pub window: usize,
    pub feature_mode: FeatureMode<T>,
    pub use_rope_in_swa: bool,
    pub share_values: bool,
}

impl<T: Scalar> MacchiatoParams<T> {
    pub fn validate(&self) -> Result<()> {
        self.latte.validate()?;
        self.swa.validate()?;
        let d = self.latte.d_model();
        let h = self.latte.heads;
        if self.swa.heads != h {
            return Err(shape_err("local and latent branches need the same head count"));
        }
        if self.swa.d_model() != d {
            return Err(shape_err("local branch input width differs"));
        }
        let dv = if self.share_values {
            self.latte.d_v()
        } else {
            self.swa.w_v.dim(1)
        };
        if dv != self.latte.d_v() {
            return Err(shape_err("local and latent value widths differ"));
        }
        self.gate_row_0.expect_shape(&[d, h])?;
        if self.window == 0 {
            return Err(LatteError::InvalidArgument("window must be at least 1".into()));
        }
        match &self.feature_mode {
            FeatureMode::Direct => {}
            FeatureMode::Conv(c) => {
                if c.width() != d {
                    return Err(shape_err("convolution width differs from model width"));
                }
            }
            FeatureMode::Rglru(r) => {
                if r.width() != d {
                    return Err(shape_err("recurrence width differs from model width"));
                }
            }
        }
        Ok(())
    }

    fn value_weights(&self) -> &Tensor<T> {
        if self.share_values {
            &self.latte.w_v
        } else {
            &self.swa.w_v
        }
    }

    /// Random parameters with direct features, shared values and rope.
    pub fn random<R: Rng + ?Sized>(
        d_model: usize,
        latents: usize,
        heads: usize,
        window: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let latte = LatteParams::random(d_model, latents, d_model, heads, std, rng)?;
        let swa = AttentionParams::random(d_model, d_model, heads, std, rng)?;
        let p = Self {
            latte,
            gate_row_0: Tensor::randn(&[d_model, heads], std, rng),
            swa,
            window,
            feature_mode: FeatureMode::Direct,
            use_rope_in_swa: true,
            share_values: true,
        };
        p.validate()?;
        Ok(p)
    }
}

/// `y_t = sum_{i<K} W_i x_{t-i}`, left zero padded.
pub fn conv_features<T: Scalar>(x: &SequenceBatch<T>, conv: &ConvParams<T>) -> Result<SequenceBatch<T>> {
    if conv.width() != x.width() {
        return Err(shape_err("convolution width differs from input width"));
    }
    let y = causal_conv(
        x.values().data(),
        conv.weights.data(),
        x.batch(),
        x.seq_len(),
        x.width(),
        conv.taps(),
        conv.depthwise,
    );
    SequenceBatch::new(Tensor::new(x.values().shape().to_vec(), y)?)
}

/// Gated linear recurrence over the input channels.
pub fn rglru_features<T: Scalar>(x: &SequenceBatch<T>, params: &RglruParams<T>) -> Result<SequenceBatch<T>> {
    if params.width() != x.width() {
        return Err(shape_err("recurrence width differs from input width"));
    }
    let rec = matmul(x.values(), &params.w_rec_gate)?;
    let inp = matmul(x.values(), &params.w_input_gate)?;
    let cache = rglru_scan(
        x.values().data(),
        rec.data(),
        inp.data(),
        params.log_decay.data(),
        x.batch(),
        x.seq_len(),
        x.width(),
    );
    SequenceBatch::new(Tensor::new(x.values().shape().to_vec(), cache.h)?)
}

/// Latent-branch features selected by the parameter's feature mode.
pub fn features<T: Scalar>(x: &SequenceBatch<T>, params: &MacchiatoParams<T>) -> Result<SequenceBatch<T>> {
    match &params.feature_mode {
        FeatureMode::Direct => Ok(x.clone()),
        FeatureMode::Conv(c) => conv_features(x, c),
        FeatureMode::Rglru(r) => rglru_features(x, r),
    }
}

fn gate_flat<T: Scalar>(y: &SequenceBatch<T>, params: &MacchiatoParams<T>) -> Result<Vec<T>> {
    params.validate()?;
    let rows = y.batch() * y.seq_len();
    let (h, slots) = (params.latte.heads, params.latte.slots_per_head());
    let local = matmul(y.values(), &params.gate_row_0)?;
    let latent = matmul(y.values(), &params.latte.w_q)?;
    let mut g = pack_gate(local.data(), latent.data(), rows, h, slots);
    head_softmax(&mut g, slots + 1);
    Ok(g)
}

/// `[B, H, T, L/H + 1]` mixture weights; index 0 is the local slot.
pub fn mixture_gate<T: Scalar>(y: &SequenceBatch<T>, params: &MacchiatoParams<T>) -> Result<Tensor<T>> {
    let g = gate_flat(y, params)?;
    let (b, t) = (y.batch(), y.seq_len());
    let (h, w) = (params.latte.heads, params.latte.slots_per_head() + 1);
    Ok(Tensor::from_fn(&[b, h, t, w], |i| {
        let j = i % w;
        let ti = (i / w) % t;
        let hi = (i / (w * t)) % h;
        let bi = i / (w * t * h);
        g[((bi * t + ti) * h + hi) * w + j]
    }))
}

/// Mixture output, and with `keep_trace` the combined `[B, H, T, T]`
/// attention matrix.
pub fn macchiato_forward<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &MacchiatoParams<T>,
    keep_trace: bool,
) -> Result<(SequenceBatch<T>, Option<AttentionMatrix<T>>)> {
    params.validate()?;
    let (batch, seq) = (x.batch(), x.seq_len());
    let heads = params.latte.heads;
    let slots = params.latte.slots_per_head();
    let rows = batch * seq;
    let y = features(x, params)?;
    let gate = gate_flat(&y, params)?;
    let (g0, g_rest) = unpack_gate(&gate, rows, heads, slots);
    let v = project(x, params.value_weights())?;
    let d_v = params.latte.d_v() / heads;

    let dims = HeadDims {
        batch,
        seq,
        heads,
        d_qk: params.swa.w_q.dim(1) / heads,
        d_v,
    };
    let mut q = project(x, &params.swa.w_q)?;
    let mut k = project(x, &params.swa.w_k)?;
    if params.use_rope_in_swa {
        if dims.d_qk % 2 != 0 {
            return Err(LatteError::InvalidArgument(format!(
                "rotary encoding needs an even head width, got {}",
                dims.d_qk
            )));
        }
        let positions: Vec<usize> = (0..seq).collect();
        for t in [&mut q, &mut k] {
            rope_in_place(t.data_mut(), batch, seq, heads, dims.d_qk, &positions, false);
        }
    }
    let (local, local_probs) = attention_forward(
        q.data(),
        k.data(),
        v.data(),
        dims,
        MaskMode::Window(params.window),
        params.swa.scaled,
        keep_trace,
    );
    let k_lat = matmul(y.values(), &params.latte.w_k)?;
    let sdims = ScanDims {
        batch,
        seq,
        heads,
        slots,
        d_v,
    };
    let latent = latent_scan(&g_rest, k_lat.data(), v.data(), sdims, DEFAULT_UNROLL);
    let vw = heads * d_v;
    let mut out = latent;
    for r in 0..rows {
        for h in 0..heads {
            let g = g0[r * heads + h];
            for d in 0..d_v {
                let at = r * vw + h * d_v + d;
                out[at] = g * local[at] + out[at];
            }
        }
    }
    let out = SequenceBatch::new(Tensor::new(vec![batch, seq, vw], out)?)?;
    if !keep_trace {
        return Ok((out, None));
    }

    let mut probs = local_probs.expect("requested").to_dense(dims);
    let sw = heads * slots;
    let mut w = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let row = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                let gl = g0[(b * seq + t) * heads + h];
                row.iter_mut().for_each(|p| *p = *p * gl);
                for l in 0..slots {
                    let c = h * slots + l;
                    let kk = |s: usize| k_lat.data()[(b * seq + s) * sw + c];
                    let m = (0..=t).map(kk).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for (s, e) in w.iter_mut().enumerate().take(t + 1) {
                        *e = (kk(s) - m).exp();
                        z += *e;
                    }
                    let p = g_rest[(b * seq + t) * sw + c];
                    for s in 0..=t {
                        row[s] += p * w[s] / z;
                    }
                }
            }
        }
    }
    let probs = Tensor::new(vec![batch, heads, seq, seq], probs)?;
    Ok((out, Some(AttentionMatrix { probs })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{sliding_window_attention, softmax_attention};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn batch(b: usize, t: usize, d: usize, seed: u64) -> SequenceBatch<f64> {
        SequenceBatch::new(Tensor::randn(&[b, t, d], 1.0, &mut rng(seed))).unwrap()
    }

    fn params(d: usize, l: usize, h: usize, w: usize, seed: u64) -> MacchiatoParams<f64> {
        MacchiatoParams::random(d, l, h, w, 1.0 / (d as f64).sqrt(), &mut rng(seed)).unwrap()
    }

    /// Input with channel 0 fixed to one, so a gate column with weight only
    /// on channel 0 yields a constant logit.
    fn with_bias_channel(x: SequenceBatch<f64>) -> SequenceBatch<f64> {
        let d = x.width();
        let mut v = x.into_values();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            if i % d == 0 {
                *e = 1.0;
            }
        }
        SequenceBatch::new(v).unwrap()
    }

    fn constant_gate(d: usize, h: usize, logit: f64) -> Tensor<f64> {
        Tensor::from_fn(&[d, h], |i| if i < h { logit } else { 0.0 })
    }

    fn swa_with_shared_values(p: &MacchiatoParams<f64>) -> AttentionParams<f64> {
        let mut s = p.swa.clone();
        s.w_v = p.latte.w_v.clone();
        s
    }

    #[test]
    fn conv_identity_and_impulse() {
        let x = batch(2, 9, 4, 1);
        for depthwise in [true, false] {
            let id = ConvParams::identity(1, 4, depthwise).unwrap();
            assert_eq!(conv_features(&x, &id).unwrap(), x);
        }
        let conv = ConvParams::<f64>::random(3, 4, true, 1.0, &mut rng(2)).unwrap();
        let imp = SequenceBatch::new(Tensor::from_fn(&[1, 10, 4], |i| {
            if i / 4 == 3 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let y = conv_features(&imp, &conv).unwrap();
        for t in 0..10 {
            let nz = y.values().data()[t * 4..(t + 1) * 4].iter().any(|&v| v != 0.0);
            assert_eq!(nz, (3..=5).contains(&t), "t = {t}");
        }
    }

    #[test]
    fn conv_matches_naive_sum() {
        let x = batch(1, 16, 3, 3);
        for depthwise in [true, false] {
            let conv = ConvParams::<f64>::random(3, 3, depthwise, 1.0, &mut rng(4)).unwrap();
            let y = conv_features(&x, &conv).unwrap();
            let w = conv.weights.data();
            for t in 0..16 {
                for o in 0..3 {
                    let mut s = 0.0;
                    for i in 0..3.min(t + 1) {
                        for c in 0..3 {
                            let wi = if depthwise {
                                if c == o {
                                    w[i * 3 + o]
                                } else {
                                    0.0
                                }
                            } else {
                                w[(i * 3 + c) * 3 + o]
                            };
                            s += wi * x.values().data()[(t - i) * 3 + c];
                        }
                    }
                    assert!((y.values().data()[t * 3 + o] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rglru_examples() {
        let mut p = RglruParams::<f64>::random(4, 0.5, &mut rng(5)).unwrap();
        let zero = SequenceBatch::new(Tensor::zeros(&[1, 6, 4])).unwrap();
        assert!(rglru_features(&zero, &p).unwrap().values().data().iter().all(|&v| v == 0.0));

        let x = batch(1, 6, 4, 6);
        p.log_decay = Tensor::full(&[4], -1e4);
        let y = rglru_features(&x, &p).unwrap();
        let gate = matmul(x.values(), &p.w_input_gate).unwrap();
        for (i, (&yv, (&g, &xv))) in y
            .values()
            .data()
            .iter()
            .zip(gate.data().iter().zip(x.values().data()))
            .enumerate()
        {
            let want = crate::numerics::sigmoid(g) * xv;
            assert!((yv - want).abs() < 1e-15, "{i}");
        }
    }

    #[test]
    fn rglru_init_decay_range() {
        let p = RglruParams::<f64>::random(64, 0.1, &mut rng(7)).unwrap();
        for &l in p.log_decay.data() {
            let ac = crate::numerics::sigmoid(l).powf(RGLRU_SHARPNESS);
            assert!((0.9..=0.999).contains(&ac));
        }
    }

    #[test]
    fn rglru_stays_within_decayed_input_envelope() {
        let p = RglruParams::<f64>::random(8, 0.3, &mut rng(8)).unwrap();
        let x = batch(1, 256, 8, 9);
        let y = rglru_features(&x, &p).unwrap();
        let gate = matmul(x.values(), &p.w_input_gate).unwrap();
        let rec = matmul(x.values(), &p.w_rec_gate).unwrap();
        for d in 0..8 {
            let base = crate::numerics::softplus(-p.log_decay.data()[d]);
            let mut bound = 0.0f64;
            for t in 0..256 {
                let at = t * 8 + d;
                let u = crate::numerics::sigmoid(gate.data()[at]) * x.values().data()[at];
                let a = (-RGLRU_SHARPNESS * crate::numerics::sigmoid(rec.data()[at]) * base).exp();
                bound = a * bound + (1.0 - a * a).sqrt() * u.abs();
                let h = y.values().data()[at];
                assert!(h.is_finite() && h.abs() <= bound * (1.0 + 1e-12), "d {d} t {t}");
            }
        }
    }

    #[test]
    fn rglru_constant_input_settles_above_input() {
        // fixed point of h = a h + sqrt(1 - a^2) u is u sqrt((1 + a) / (1 - a))
        let d = 1;
        let lam = 3.0f64;
        let p = RglruParams::new(
            Tensor::full(&[d, d], 50.0),
            Tensor::full(&[d, d], 50.0),
            Tensor::full(&[d], lam),
        )
        .unwrap();
        let x = SequenceBatch::new(Tensor::full(&[1, 4000, d], 1.0)).unwrap();
        let y = rglru_features(&x, &p).unwrap();
        let a = crate::numerics::sigmoid(lam).powf(RGLRU_SHARPNESS);
        let fixed = ((1.0 + a) / (1.0 - a)).sqrt();
        assert!((y.values().data()[3999] - fixed).abs() < 1e-9);
        assert!(fixed > 1.0);
    }

    #[test]
    fn gate_examples() {
        let x = with_bias_channel(batch(1, 12, 8, 10));
        let mut p = params(8, 4, 2, 3, 11);
        let g = mixture_gate(&x, &p).unwrap();
        for row in g.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        p.gate_row_0 = Tensor::zeros(&[8, 2]);
        p.latte.w_q = Tensor::zeros(&[8, 4]);
        let g = mixture_gate(&x, &p).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        p.gate_row_0 = constant_gate(8, 2, 1e4);
        p.latte = LatteParams::random(8, 4, 8, 2, 0.3, &mut rng(12)).unwrap();
        let g = mixture_gate(&x, &p).unwrap();
        for row in g.data().chunks(3) {
            assert!((row[0] - 1.0).abs() < 1e-12);
        }
        let (mix, _) = macchiato_forward(&x, &p, false).unwrap();
        let (swa, _) = sliding_window_attention(&x, &swa_with_shared_values(&p), 3, true).unwrap();
        assert!(mix.values().max_abs_diff(swa.values()) < 1e-6);
    }

    #[test]
    fn no_latents_is_exactly_sliding_window() {
        for rope in [true, false] {
            let mut p = params(8, 4, 2, 5, 13);
            p.latte.w_q = Tensor::zeros(&[8, 0]);
            p.latte.w_k = Tensor::zeros(&[8, 0]);
            p.use_rope_in_swa = rope;
            let x = batch(2, 20, 8, 14);
            let (mix, _) = macchiato_forward(&x, &p, false).unwrap();
            let (swa, _) = sliding_window_attention(&x, &swa_with_shared_values(&p), 5, rope).unwrap();
            assert_eq!(mix.values().data(), swa.values().data());
        }
    }

    #[test]
    fn wide_window_local_gate_is_causal_attention() {
        let x = with_bias_channel(batch(1, 10, 6, 15));
        let mut p = params(6, 4, 2, 10, 16);
        p.use_rope_in_swa = false;
        p.gate_row_0 = constant_gate(6, 2, 1e4);
        let (mix, _) = macchiato_forward(&x, &p, false).unwrap();
        let (att, _) = softmax_attention(&x, &swa_with_shared_values(&p), MaskMode::Causal).unwrap();
        assert!(mix.values().max_abs_diff(att.values()) < 1e-6);
    }

    #[test]
    fn trace_is_stochastic_causal_and_reproduces_output() {
        let x = batch(1, 48, 8, 17);
        let mut p = params(8, 8, 2, 8, 18);
        p.feature_mode = FeatureMode::Conv(ConvParams::random(3, 8, true, 0.5, &mut rng(19)).unwrap());
        let (out, trace) = macchiato_forward(&x, &p, true).unwrap();
        let trace = trace.unwrap();
        assert!(trace.max_row_deviation() < 1e-6);
        let v = project(&x, &p.latte.w_v).unwrap();
        for h in 0..2 {
            let m = trace.head(0, h);
            for t in 0..48 {
                for s in t + 1..48 {
                    assert_eq!(m.data()[t * 48 + s], 0.0);
                }
                for d in 0..4 {
                    let want: f64 = (0..48).map(|s| m.data()[t * 48 + s] * v.data()[s * 8 + h * 4 + d]).sum();
                    assert!((out.values().data()[t * 8 + h * 4 + d] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn causality_is_exact_for_every_feature_mode() {
        let x = batch(1, 16, 8, 20);
        let modes = [
            FeatureMode::Direct,
            FeatureMode::Conv(ConvParams::random(3, 8, false, 0.4, &mut rng(21)).unwrap()),
            FeatureMode::Rglru(RglruParams::random(8, 0.4, &mut rng(22)).unwrap()),
        ];
        for mode in modes {
            let mut p = params(8, 4, 2, 3, 23);
            p.feature_mode = mode;
            let (a, _) = macchiato_forward(&x, &p, false).unwrap();
            let mut y = x.values().clone();
            for e in &mut y.data_mut()[9 * 8..] {
                *e -= 2.0;
            }
            let (b, _) = macchiato_forward(&SequenceBatch::new(y).unwrap(), &p, false).unwrap();
            assert_eq!(&a.values().data()[..9 * 8], &b.values().data()[..9 * 8]);
        }
    }

    fn permuted_prefix_change(mode: FeatureMode<f64>, seed: u64) -> f64 {
        let t = 12;
        let x = with_bias_channel(batch(1, t, 8, seed));
        let mut p = params(8, 8, 2, 2, seed + 1);
        p.gate_row_0 = constant_gate(8, 2, -1e4);
        p.feature_mode = mode;
        let mut perm: Vec<usize> = (0..t - 1).collect();
        perm.shuffle(&mut rng(seed + 2));
        perm.push(t - 1);
        let xp = Tensor::from_fn(&[1, t, 8], |i| x.values().data()[perm[i / 8] * 8 + i % 8]);
        let (a, _) = macchiato_forward(&x, &p, false).unwrap();
        let (b, _) = macchiato_forward(&SequenceBatch::new(xp).unwrap(), &p, false).unwrap();
        (0..8)
            .map(|d| (a.values().data()[(t - 1) * 8 + d] - b.values().data()[(t - 1) * 8 + d]).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn positional_features_break_prefix_permutation_invariance() {
        assert!(permuted_prefix_change(FeatureMode::Direct, 30) < 1e-6);
        let conv = FeatureMode::Conv(ConvParams::random(3, 8, true, 1.0, &mut rng(31)).unwrap());
        assert!(permuted_prefix_change(conv, 30) > 1e-3);
        let rec = FeatureMode::Rglru(RglruParams::random(8, 1.0, &mut rng(32)).unwrap());
        assert!(permuted_prefix_change(rec, 30) > 1e-3);
    }

    #[test]
    fn rejects_inconsistent_params() {
        let mut p = params(8, 4, 2, 3, 40);
        p.window = 0;
        assert!(p.validate().is_err());
        let mut p = params(8, 4, 2, 3, 40);
        p.gate_row_0 = Tensor::zeros(&[8, 3]);
        assert!(p.validate().is_err());
        assert!(ConvParams::<f64>::new(Tensor::zeros(&[0, 4]), true).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn combined_rows_sum_to_one(seed in 0u64..1000, w in 1usize..12, t in 1usize..24) {
            let x = batch(1, t, 8, seed);
            let p = params(8, 8, 2, w, seed + 1);
            let (_, tr) = macchiato_forward(&x, &p, true).unwrap();
            let tr = tr.unwrap();
            prop_assert!(tr.max_row_deviation() < 1e-6);
            prop_assert!(tr.min_entry() >= 0.0);
        }

        #[test]
        fn gate_rows_sum_to_one(seed in 0u64..1000, scale in 0.1f64..30.0) {
            let x = SequenceBatch::new(Tensor::randn(&[2, 9, 6], scale, &mut rng(seed))).unwrap();
            let p = params(6, 6, 3, 2, seed + 1);
            let g = mixture_gate(&x, &p).unwrap();
            for row in g.data().chunks(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
