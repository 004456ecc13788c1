//! Reference softmax attention and sliding-window attention with rotary
//! position encoding.
//!
//! These are the baselines the latent mixers are measured against, and the
//! sliding-window variant doubles as the local (`l = 0`) branch of the
//! hybrid mixer.

pub mod kernel;

use crate::error::{shape_err, LatteError, Result};
use crate::numerics::{matmul, Scalar, Tensor};

pub use kernel::{HeadDims, Probs};

/// A batch of token-embedding sequences, `[B, T, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch<T> {
    values: Tensor<T>,
}

impl<T: Scalar> SequenceBatch<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        values.expect_rank(3, "sequence batch")?;
        if values.dim(1) == 0 {
            return Err(LatteError::EmptySequence);
        }
        if !values.all_finite() {
            return Err(LatteError::NonFinite("sequence batch values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.dim(0)
    }

    pub fn seq_len(&self) -> usize {
        self.values.dim(1)
    }

    pub fn width(&self) -> usize {
        self.values.dim(2)
    }

    /// The `[B, D]` slice at step `t`.
    pub fn step(&self, t: usize) -> Tensor<T> {
        let (b, n, d) = (self.batch(), self.seq_len(), self.width());
        let mut out = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            let src = &self.values.data()[(bi * n + t) * d..][..d];
            out.data_mut()[bi * d..(bi + 1) * d].copy_from_slice(src);
        }
        out
    }
}

/// Query/key/value projections for multi-head softmax attention.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub heads: usize,
    /// Divide logits by `sqrt(d_head)`.
    pub scaled: bool,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(w_q: Tensor<T>, w_k: Tensor<T>, w_v: Tensor<T>, heads: usize) -> Result<Self> {
        let p = Self {
            w_q,
            w_k,
            w_v,
            heads,
            scaled: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn random<R: rand::Rng + ?Sized>(
        d_model: usize,
        d_proj: usize,
        heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            Tensor::randn(&[d_model, d_proj], std, rng),
            Tensor::randn(&[d_model, d_proj], std, rng),
            Tensor::randn(&[d_model, d_proj], std, rng),
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
        if self.heads == 0 || self.w_q.dim(1) % self.heads != 0 || self.w_v.dim(1) % self.heads != 0
        {
            return Err(shape_err(format!(
                "{} heads do not divide projection widths {} / {}",
                self.heads,
                self.w_q.dim(1),
                self.w_v.dim(1)
            )));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.w_q.dim(0)
    }

    pub fn head_dims(&self, batch: usize, seq: usize) -> HeadDims {
        HeadDims {
            batch,
            seq,
            heads: self.heads,
            d_qk: self.w_q.dim(1) / self.heads,
            d_v: self.w_v.dim(1) / self.heads,
        }
    }
}

/// Attention mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Causal,
    Bidirectional,
    /// Causal window: query `t` sees keys `max(0, t - w) ..= t`.
    Window(usize),
}

/// Per-head attention probabilities `a_ts = p(s | t)`, `[B, H, T, T]`.
#[derive(Debug, Clone)]
pub struct AttentionMatrix<T> {
    pub probs: Tensor<T>,
}

impl<T: Scalar> AttentionMatrix<T> {
    /// `[B, H, T]` row sums.
    pub fn row_sums(&self) -> Tensor<T> {
        let s = self.probs.shape();
        let (b, h, t, n) = (s[0], s[1], s[2], s[3]);
        Tensor::from_fn(&[b, h, t], |i| {
            self.probs.data()[i * n..(i + 1) * n].iter().copied().sum()
        })
    }

    /// `max |row_sum - 1|` over all rows.
    pub fn max_row_deviation(&self) -> f64 {
        self.row_sums()
            .data()
            .iter()
            .map(|s| (s.as_f64() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.probs
            .data()
            .iter()
            .map(|p| p.as_f64())
            .fold(f64::INFINITY, f64::min)
    }

    /// The `[T, T]` matrix for one batch item and head.
    pub fn head(&self, b: usize, h: usize) -> Tensor<T> {
        let s = self.probs.shape();
        let n = s[2] * s[3];
        let at = (b * s[1] + h) * n;
        Tensor::new(vec![s[2], s[3]], self.probs.data()[at..at + n].to_vec())
            .expect("head slice shape")
    }
}

pub(crate) fn project<T: Scalar>(x: &SequenceBatch<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if x.width() != w.dim(0) {
        return Err(shape_err(format!(
            "input width {} vs projection {:?}",
            x.width(),
            w.shape()
        )));
    }
    matmul(x.values(), w)
}

fn run<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &AttentionParams<T>,
    mask: MaskMode,
    use_rope: bool,
) -> Result<(SequenceBatch<T>, AttentionMatrix<T>)> {
    params.validate()?;
    let dims = params.head_dims(x.batch(), x.seq_len());
    let mut q = project(x, &params.w_q)?;
    let mut k = project(x, &params.w_k)?;
    let v = project(x, &params.w_v)?;
    if use_rope {
        if dims.d_qk % 2 != 0 {
            return Err(LatteError::InvalidArgument(format!(
                "rotary encoding needs an even head width, got {}",
                dims.d_qk
            )));
        }
        let positions: Vec<usize> = (0..dims.seq).collect();
        for t in [&mut q, &mut k] {
            kernel::rope_in_place(
                t.data_mut(),
                dims.batch,
                dims.seq,
                dims.heads,
                dims.d_qk,
                &positions,
                false,
            );
        }
    }
    let (out, probs) =
        kernel::attention_forward(q.data(), k.data(), v.data(), dims, mask, params.scaled, true);
    let probs = probs.expect("probabilities were requested").to_dense(dims);
    let out = Tensor::new(vec![dims.batch, dims.seq, dims.heads * dims.d_v], out)?;
    let probs = Tensor::new(vec![dims.batch, dims.heads, dims.seq, dims.seq], probs)?;
    Ok((SequenceBatch { values: out }, AttentionMatrix { probs }))
}

/// Multi-head softmax attention with a causal or bidirectional mask.
pub fn softmax_attention<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &AttentionParams<T>,
    mask: MaskMode,
) -> Result<(SequenceBatch<T>, AttentionMatrix<T>)> {
    if let MaskMode::Window(_) = mask {
        return Err(LatteError::InvalidArgument(
            "softmax_attention takes a causal or bidirectional mask; use sliding_window_attention"
                .into(),
        ));
    }
    run(x, params, mask, false)
}

/// Causal attention restricted to the last `w` positions (plus the current one).
pub fn sliding_window_attention<T: Scalar>(
    x: &SequenceBatch<T>,
    params: &AttentionParams<T>,
    w: usize,
    use_rope: bool,
) -> Result<(SequenceBatch<T>, AttentionMatrix<T>)> {
    if w == 0 {
        return Err(LatteError::InvalidArgument("window must be at least 1".into()));
    }
    run(x, params, MaskMode::Window(w), use_rope)
}

/// Rotary position encoding of a `[B, H, T, d]` tensor.
pub fn rope_encode<T: Scalar>(q_or_k: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>> {
    q_or_k.expect_rank(4, "rope input")?;
    let s = q_or_k.shape();
    let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
    if d % 2 != 0 {
        return Err(LatteError::InvalidArgument(format!(
            "rotary encoding needs an even width, got {d}"
        )));
    }
    if positions.len() != t {
        return Err(shape_err(format!(
            "{} positions for sequence length {t}",
            positions.len()
        )));
    }
    // [B, H, T, d] is [B*H, T, 1*d] in the kernel's layout.
    let mut out = q_or_k.clone();
    kernel::rope_in_place(out.data_mut(), b * h, t, 1, d, positions, false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn batch(b: usize, t: usize, d: usize, seed: u64) -> SequenceBatch<f64> {
        SequenceBatch::new(Tensor::randn(&[b, t, d], 1.0, &mut rng(seed))).unwrap()
    }

    /// Direct masked softmax, one query at a time.
    fn masked_oracle(
        x: &SequenceBatch<f64>,
        p: &AttentionParams<f64>,
        lo_of: impl Fn(usize) -> usize,
        hi_of: impl Fn(usize) -> usize,
    ) -> Vec<f64> {
        let q = project(x, &p.w_q).unwrap();
        let k = project(x, &p.w_k).unwrap();
        let dims = p.head_dims(x.batch(), x.seq_len());
        let scale = 1.0 / (dims.d_qk as f64).sqrt();
        let (bn, tn, hn, dq) = (dims.batch, dims.seq, dims.heads, dims.d_qk);
        let mut out = vec![0.0; bn * hn * tn * tn];
        for b in 0..bn {
            for h in 0..hn {
                for t in 0..tn {
                    let logit = |s: usize| {
                        (0..dq)
                            .map(|i| {
                                q.data()[(b * tn + t) * hn * dq + h * dq + i]
                                    * k.data()[(b * tn + s) * hn * dq + h * dq + i]
                            })
                            .sum::<f64>()
                            * scale
                    };
                    let z: f64 = (lo_of(t)..=hi_of(t)).map(|s| logit(s).exp()).sum();
                    for s in lo_of(t)..=hi_of(t) {
                        out[((b * hn + h) * tn + t) * tn + s] = logit(s).exp() / z;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_token_attends_to_itself() {
        let x = batch(2, 1, 4, 1);
        let p = AttentionParams::random(4, 4, 2, 0.5, &mut rng(2)).unwrap();
        let (out, w) = softmax_attention(&x, &p, MaskMode::Causal).unwrap();
        assert!(w.probs.data().iter().all(|&v| v == 1.0));
        let v = project(&x, &p.w_v).unwrap();
        assert!(out.values().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn identical_tokens_give_uniform_causal_weights() {
        let row = Tensor::<f64>::randn(&[1, 1, 6], 1.0, &mut rng(3));
        let x = SequenceBatch::new(Tensor::from_fn(&[1, 5, 6], |i| row.data()[i % 6])).unwrap();
        let p = AttentionParams::random(6, 6, 3, 0.7, &mut rng(4)).unwrap();
        let (_, w) = softmax_attention(&x, &p, MaskMode::Causal).unwrap();
        for h in 0..3 {
            let m = w.head(0, h);
            for t in 0..5 {
                for s in 0..5 {
                    let expect = if s <= t { 1.0 / (t + 1) as f64 } else { 0.0 };
                    assert!((m.data()[t * 5 + s] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn analytic_two_token_row() {
        // q_2 = (1, 0); k_1 = (0, 1), k_2 = (ln 2, 0) → logits 0 and ln 2
        let x = SequenceBatch::new(
            Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let w_q = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let w_k = Tensor::new(vec![2, 2], vec![2f64.ln(), 0.0, 0.0, 1.0]).unwrap();
        let mut p = AttentionParams::new(w_q, w_k, Tensor::zeros(&[2, 2]), 1).unwrap();
        p.scaled = false;
        let (_, w) = softmax_attention(&x, &p, MaskMode::Causal).unwrap();
        let m = w.head(0, 0);
        assert!((m.data()[2] - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.data()[3] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn window_covering_sequence_equals_causal() {
        let x = batch(2, 12, 8, 5);
        let p = AttentionParams::random(8, 8, 2, 0.5, &mut rng(6)).unwrap();
        let (a, wa) = softmax_attention(&x, &p, MaskMode::Causal).unwrap();
        for w in [11, 12, 40] {
            let (b, wb) = sliding_window_attention(&x, &p, w, false).unwrap();
            assert!(a.values().max_abs_diff(b.values()) < 1e-6);
            assert!(wa.probs.max_abs_diff(&wb.probs) < 1e-6);
        }
    }

    #[test]
    fn window_one_identical_tokens() {
        let x = SequenceBatch::new(Tensor::<f64>::full(&[1, 6, 4], 0.3)).unwrap();
        let p = AttentionParams::random(4, 4, 1, 0.5, &mut rng(7)).unwrap();
        let (_, w) = sliding_window_attention(&x, &p, 1, false).unwrap();
        let m = w.head(0, 0);
        assert_eq!(m.data()[0], 1.0);
        for t in 1..6 {
            for s in 0..6 {
                let v = m.data()[t * 6 + s];
                if s + 1 == t || s == t {
                    assert!((v - 0.5).abs() < 1e-12, "t={t} s={s} v={v}");
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn banded_window_matches_masked_oracle() {
        let x = batch(1, 32, 8, 8);
        let p = AttentionParams::random(8, 8, 2, 0.5, &mut rng(9)).unwrap();
        let w = 8;
        let (_, wm) = sliding_window_attention(&x, &p, w, false).unwrap();
        let oracle = masked_oracle(&x, &p, |t| t.saturating_sub(w), |t| t);
        for (a, b) in wm.probs.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(wm.max_row_deviation() < 1e-6);
        for bh in 0..2 {
            let m = wm.head(0, bh);
            for t in 0..32 {
                let nz = m.data()[t * 32..(t + 1) * 32].iter().filter(|&&v| v != 0.0).count();
                assert!(nz <= w + 1);
            }
        }
    }

    #[test]
    fn bidirectional_matches_oracle_and_is_equivariant() {
        let x = batch(1, 10, 6, 10);
        let p = AttentionParams::random(6, 6, 2, 0.5, &mut rng(11)).unwrap();
        let (out, wm) = softmax_attention(&x, &p, MaskMode::Bidirectional).unwrap();
        let oracle = masked_oracle(&x, &p, |_| 0, |_| 9);
        for (a, b) in wm.probs.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let perm: Vec<usize> = vec![3, 7, 0, 9, 1, 5, 2, 8, 6, 4];
        let xp = SequenceBatch::new(Tensor::from_fn(&[1, 10, 6], |i| {
            x.values().data()[perm[i / 6] * 6 + i % 6]
        }))
        .unwrap();
        let (outp, _) = softmax_attention(&xp, &p, MaskMode::Bidirectional).unwrap();
        for t in 0..10 {
            for j in 0..6 {
                let a = outp.values().data()[t * 6 + j];
                let b = out.values().data()[perm[t] * 6 + j];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_outputs_ignore_the_future() {
        let x = batch(1, 9, 4, 12);
        let p = AttentionParams::random(4, 4, 2, 0.5, &mut rng(13)).unwrap();
        for mask in [MaskMode::Causal, MaskMode::Window(2)] {
            let run_mask = |x: &SequenceBatch<f64>| match mask {
                MaskMode::Window(w) => sliding_window_attention(x, &p, w, true).unwrap().0,
                m => softmax_attention(x, &p, m).unwrap().0,
            };
            let base = run_mask(&x);
            let mut pert = x.values().clone();
            for i in 6 * 4..9 * 4 {
                pert.data_mut()[i] += 3.0;
            }
            let moved = run_mask(&SequenceBatch::new(pert).unwrap());
            assert_eq!(&base.values().data()[..6 * 4], &moved.values().data()[..6 * 4]);
        }
    }

    #[test]
    fn rope_examples() {
        let x = Tensor::<f64>::randn(&[1, 2, 3, 4], 1.0, &mut rng(14));
        let same = rope_encode(&x, &[0, 0, 0]).unwrap();
        assert!(same.max_abs_diff(&x) < 1e-15);

        let unit = Tensor::new(vec![1, 1, 1, 2], vec![1.0f64, 0.0]).unwrap();
        for p in [1usize, 3, 17] {
            let r = rope_encode(&unit, &[p]).unwrap();
            assert!((r.data()[0] - (p as f64).cos()).abs() < 1e-12);
            assert!((r.data()[1] - (p as f64).sin()).abs() < 1e-12);
        }
        assert!(rope_encode(&Tensor::<f64>::zeros(&[1, 1, 1, 3]), &[0]).is_err());
    }

    #[test]
    fn rope_dot_depends_only_on_offset() {
        let mut r = rng(15);
        let q = Tensor::<f64>::randn(&[1, 1, 1, 8], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[1, 1, 1, 8], 1.0, &mut r);
        let dot_at = |m: usize, n: usize| {
            let a = rope_encode(&q, &[m]).unwrap();
            let b = rope_encode(&k, &[n]).unwrap();
            crate::numerics::dot(a.data(), b.data())
        };
        let (d1, d2) = (dot_at(5, 3), dot_at(7, 5));
        assert!(((d1 - d2) / d1.abs().max(1e-12)).abs() <= 1e-6);
        let norm = |t: &Tensor<f64>| crate::numerics::dot(t.data(), t.data());
        assert!((norm(&rope_encode(&q, &[11]).unwrap()) - norm(&q)).abs() < 1e-12);
    }

    #[test]
    fn unscaled_logits_toggle() {
        let x = batch(1, 6, 4, 16);
        let mut p = AttentionParams::random(4, 4, 1, 0.8, &mut rng(17)).unwrap();
        let (_, scaled) = softmax_attention(&x, &p, MaskMode::Causal).unwrap();
        p.scaled = false;
        let (_, raw) = softmax_attention(&x, &p, MaskMode::Causal).unwrap();
        assert!(scaled.max_row_deviation() < 1e-12 && raw.max_row_deviation() < 1e-12);
        assert!(scaled.probs.max_abs_diff(&raw.probs) > 1e-6);
    }

    #[test]
    fn shape_errors() {
        let x = batch(1, 4, 5, 18);
        let p = AttentionParams::random(4, 4, 1, 0.8, &mut rng(19)).unwrap();
        assert!(softmax_attention(&x, &p, MaskMode::Causal).is_err());
        assert!(AttentionParams::<f64>::random(4, 6, 4, 0.8, &mut rng(19)).is_err());
        assert!(SequenceBatch::new(Tensor::<f64>::zeros(&[1, 0, 4])).is_err());
    }
}
