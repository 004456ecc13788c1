use latte::attention::kernel::HeadDims;
use latte::latte::kernel::{head_softmax, ScanDims};
use latte::macchiato::kernel::pack_gate;
use latte::linear::LinearDims;
use latte::{LatteError, MaskMode, Result, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MixerKind, ModelConfig};
use crate::params::{layer_prefix, ParameterStore};
use crate::tape::{AttentionSpec, Gradients, MixtureSpec, Tape, Var};

/// Token ids with next-token targets and a loss mask, all `[B * T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<usize>, targets: Vec<usize>, mask: Vec<bool>, batch: usize, seq: usize) -> Result<Self> {
        let n = batch * seq;
        if tokens.len() != n || targets.len() != n || mask.len() != n {
            return Err(LatteError::Shape(format!(
                "batch {batch}x{seq} with {} tokens, {} targets, {} mask entries",
                tokens.len(),
                targets.len(),
                mask.len()
            )));
        }
        if n == 0 {
            return Err(LatteError::EmptySequence);
        }
        Ok(Self {
            tokens,
            targets,
            mask,
            batch,
            seq,
        })
    }

    /// Language-modelling batch: targets are the tokens shifted left by one,
    /// the last position of each row is unmasked.
    pub fn next_token(rows: &[Vec<usize>]) -> Result<Self> {
        let batch = rows.len();
        let seq = rows.first().map_or(0, |r| r.len().saturating_sub(1));
        let mut tokens = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for r in rows {
            if r.len() != seq + 1 {
                return Err(LatteError::Shape("ragged token rows".into()));
            }
            tokens.extend_from_slice(&r[..seq]);
            targets.extend_from_slice(&r[1..]);
        }
        Self::new(tokens, targets, vec![true; batch * seq], batch, seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Train { step: usize },
    Eval,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the dropout mask at (`step`, `layer`, `site`).
pub fn dropout_seed(seed: u64, step: u64, layer: usize, site: usize) -> u64 {
    [step, layer as u64, site as u64]
        .into_iter()
        .fold(splitmix(seed), |acc, v| splitmix(acc ^ v))
}

struct Graph<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    store: &'a ParameterStore<T>,
    cfg: &'a ModelConfig,
    pass: Pass,
    batch: usize,
    seq: usize,
    probes: Vec<(String, Var)>,
    usage: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Graph<'_, T> {
    fn capture_usage(&mut self, local: Option<Var>, latent: Var) -> Result<()> {
        let Some(usage) = self.usage.as_mut() else {
            return Ok(());
        };
        let (h, slots) = (self.cfg.n_heads, self.cfg.slots_per_head());
        let rows = self.batch * self.seq;
        let latent = self.tape.value(latent).data();
        let (mut p, width) = match local {
            Some(l) => (pack_gate(self.tape.value(l).data(), latent, rows, h, slots), slots + 1),
            None => (latent.to_vec(), slots),
        };
        head_softmax(&mut p, width);
        usage.push(Tensor::new(vec![self.batch, self.seq, h, width], p)?);
        Ok(())
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.store.get(name)?.clone();
        Ok(self.tape.param(name, t))
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.p(&format!("{prefix}.gain"))?;
        if self.cfg.plusplus {
            self.tape.rms_norm(x, gain, self.cfg.norm_eps)
        } else {
            let bias = self.p(&format!("{prefix}.bias"))?;
            self.tape.layer_norm(x, gain, bias, self.cfg.norm_eps)
        }
    }

    fn dropout(&mut self, x: Var, layer: usize, site: usize) -> Result<Var> {
        let rate = self.cfg.dropout;
        let step = match self.pass {
            Pass::Train { step } if rate > 0.0 => step,
            _ => return Ok(x),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed(self.cfg.seed, step as u64, layer, site));
        let keep = (0..self.tape.value(x).len())
            .map(|_| rng.gen::<f64>() >= rate)
            .collect();
        self.tape.dropout(x, keep, rate)
    }

    fn head_dims(&self, d_qk: usize) -> HeadDims {
        let h = self.cfg.n_heads;
        HeadDims {
            batch: self.batch,
            seq: self.seq,
            heads: h,
            d_qk: d_qk / h,
            d_v: self.cfg.d_model / h,
        }
    }

    fn mixer(&mut self, x: Var, p: &str) -> Result<Var> {
        let cfg = self.cfg;
        let (h, d) = (cfg.n_heads, cfg.d_model);
        let w_v = self.p(&format!("{p}.w_v"))?;
        let v = self.tape.matmul(x, w_v)?;
        let q_w = self.p(&format!("{p}.w_q"))?;
        let k_w = self.p(&format!("{p}.w_k"))?;
        let mixed = match cfg.mixer_kind {
            MixerKind::Attention | MixerKind::Swa => {
                let q = self.tape.matmul(x, q_w)?;
                let k = self.tape.matmul(x, k_w)?;
                let mask = if cfg.mixer_kind == MixerKind::Swa {
                    MaskMode::Window(cfg.window)
                } else {
                    MaskMode::Causal
                };
                let spec = AttentionSpec {
                    dims: self.head_dims(d),
                    mask,
                    scaled: true,
                    rope: cfg.rope,
                };
                self.tape.attention(q, k, v, spec)?
            }
            MixerKind::Linear => {
                let q = self.tape.matmul(x, q_w)?;
                let k = self.tape.matmul(x, k_w)?;
                let dims = LinearDims {
                    batch: self.batch,
                    seq: self.seq,
                    heads: h,
                    features: cfg.slots_per_head(),
                    d_v: d / h,
                };
                self.tape.linear_attention(q, k, v, dims)?
            }
            MixerKind::Latte => {
                let q = self.tape.matmul(x, q_w)?;
                let k = self.tape.matmul(x, k_w)?;
                self.capture_usage(None, q)?;
                let dims = ScanDims {
                    batch: self.batch,
                    seq: self.seq,
                    heads: h,
                    slots: cfg.slots_per_head(),
                    d_v: d / h,
                };
                self.tape.latent_attention(q, k, v, dims, cfg.unroll)?
            }
            MixerKind::MacchiatoConv | MixerKind::MacchiatoRglru => {
                let y = if cfg.mixer_kind == MixerKind::MacchiatoConv {
                    let w = self.p(&format!("{p}.conv"))?;
                    self.tape.causal_conv(x, w, cfg.conv_depthwise)?
                } else {
                    let w_in = self.p(&format!("{p}.rglru_in"))?;
                    let w_rec = self.p(&format!("{p}.rglru_rec"))?;
                    let lam = self.p(&format!("{p}.rglru_log_decay"))?;
                    let in_pre = self.tape.matmul(x, w_in)?;
                    let rec_pre = self.tape.matmul(x, w_rec)?;
                    self.tape.rglru(x, rec_pre, in_pre, lam)?
                };
                let gate_w = self.p(&format!("{p}.gate_local"))?;
                let local_logit = self.tape.matmul(y, gate_w)?;
                let latent_logits = self.tape.matmul(y, q_w)?;
                let k_latent = self.tape.matmul(y, k_w)?;
                self.capture_usage(Some(local_logit), latent_logits)?;
                let lq = self.p(&format!("{p}.local_q"))?;
                let lk = self.p(&format!("{p}.local_k"))?;
                let q_local = self.tape.matmul(x, lq)?;
                let k_local = self.tape.matmul(x, lk)?;
                let spec = MixtureSpec {
                    local: AttentionSpec {
                        dims: self.head_dims(d),
                        mask: MaskMode::Window(cfg.window),
                        scaled: true,
                        rope: cfg.rope,
                    },
                    slots: cfg.slots_per_head(),
                    unroll: cfg.unroll,
                };
                self.tape
                    .mixture(local_logit, latent_logits, k_latent, q_local, k_local, v, spec)?
            }
        };
        let w_o = self.p(&format!("{p}.w_o"))?;
        self.tape.matmul(mixed, w_o)
    }

    fn ffn(&mut self, x: Var, p: &str) -> Result<Var> {
        if self.cfg.plusplus {
            let wg = self.p(&format!("{p}.w_gate"))?;
            let wu = self.p(&format!("{p}.w_up"))?;
            let wd = self.p(&format!("{p}.w_down"))?;
            let a = self.tape.matmul(x, wg)?;
            let b = self.tape.matmul(x, wu)?;
            let g = self.tape.swiglu(a, b)?;
            self.tape.matmul(g, wd)
        } else {
            let wi = self.p(&format!("{p}.w_in"))?;
            let wo = self.p(&format!("{p}.w_out"))?;
            let a = self.tape.matmul(x, wi)?;
            let g = self.tape.gelu(a);
            self.tape.matmul(g, wo)
        }
    }

    fn logits(&mut self, tokens: &[usize]) -> Result<Var> {
        let (b, t) = (self.batch, self.seq);
        let table = self.p("embed.tokens")?;
        let mut h = self.tape.embedding(table, tokens, &[b, t])?;
        if self.cfg.learned_positions {
            let rows = self.store.get("embed.positions")?.dim(0);
            if t > rows {
                return Err(LatteError::PositionTableExceeded { len: t, table: rows });
            }
            let pos = self.p("embed.positions")?;
            let ids: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
            let e = self.tape.embedding(pos, &ids, &[b, t])?;
            h = self.tape.add(h, e)?;
        }
        self.probes.push(("embedding".into(), h));
        for i in 0..self.cfg.n_layers {
            let p = layer_prefix(i);
            let n = self.norm(h, &format!("{p}.norm1"))?;
            let m = self.mixer(n, &format!("{p}.mixer"))?;
            self.probes.push((format!("{p}.mixer"), m));
            let m = self.dropout(m, i, 0)?;
            h = self.tape.add(h, m)?;
            let n = self.norm(h, &format!("{p}.norm2"))?;
            let f = self.ffn(n, &format!("{p}.ffn"))?;
            self.probes.push((format!("{p}.ffn"), f));
            let f = self.dropout(f, i, 1)?;
            h = self.tape.add(h, f)?;
        }
        let n = self.norm(h, "final_norm")?;
        self.probes.push(("final_norm".into(), n));
        let w = self.p("head.w")?;
        let out = self.tape.matmul(n, w)?;
        self.probes.push(("head".into(), out));
        Ok(out)
    }

    fn first_non_finite(&self) -> Option<String> {
        self.probes
            .iter()
            .find(|(_, v)| !self.tape.value(*v).all_finite())
            .map(|(name, _)| name.clone())
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    match tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        Some(&id) => Err(LatteError::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        }),
        None => Ok(()),
    }
}

/// Next-token logits `[B, T, V]` for `tokens` laid out `[B * T]`.
pub fn forward_lm<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    seq: usize,
    pass: Pass,
) -> Result<Tensor<T>> {
    if tokens.len() != batch * seq {
        return Err(LatteError::Shape(format!(
            "{} tokens for a {batch}x{seq} batch",
            tokens.len()
        )));
    }
    if tokens.is_empty() {
        return Err(LatteError::EmptySequence);
    }
    check_tokens(cfg, tokens)?;
    let mut tape = Tape::new(false);
    let mut g = Graph {
        tape: &mut tape,
        store,
        cfg,
        pass,
        batch,
        seq,
        probes: Vec::new(),
        usage: None,
    };
    let out = g.logits(tokens)?;
    Ok(tape.value(out).clone())
}

/// Per-layer query distributions over latent states, `[B, T, H, S]`; for
/// the hybrid mixers state 0 is the local window and `S = L/H + 1`.
pub fn latent_usage<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Vec<Tensor<T>>> {
    if !cfg.mixer_kind.has_latents() {
        return Err(LatteError::InvalidConfig(format!(
            "mixer `{}` has no latent states",
            cfg.mixer_kind
        )));
    }
    if tokens.len() != batch * seq || tokens.is_empty() {
        return Err(LatteError::Shape(format!("{} tokens for a {batch}x{seq} batch", tokens.len())));
    }
    check_tokens(cfg, tokens)?;
    let mut tape = Tape::new(false);
    let mut g = Graph {
        tape: &mut tape,
        store,
        cfg,
        pass: Pass::Eval,
        batch,
        seq,
        probes: Vec::new(),
        usage: Some(Vec::new()),
    };
    g.logits(tokens)?;
    Ok(g.usage.take().unwrap_or_default())
}

/// Masked mean cross-entropy and parameter gradients scaled by
/// `loss_scale`. `tape` must be fresh and recording.
pub fn loss_and_grads<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    batch: &TokenBatch,
    pass: Pass,
    loss_scale: T,
    tape: &mut Tape<T>,
) -> Result<(T, Gradients<T>)> {
    if !tape.is_recording() || !tape.is_empty() {
        return Err(LatteError::InvalidArgument("loss_and_grads needs a fresh recording tape".into()));
    }
    check_tokens(cfg, &batch.tokens)?;
    let step = match pass {
        Pass::Train { step } => step,
        Pass::Eval => 0,
    };
    let mut g = Graph {
        tape,
        store,
        cfg,
        pass,
        batch: batch.batch,
        seq: batch.seq,
        probes: Vec::new(),
        usage: None,
    };
    let logits = g.logits(&batch.tokens)?;
    let loss = g.tape.cross_entropy(logits, &batch.targets, &batch.mask)?;
    let value = g.tape.value(loss).data()[0];
    if !value.is_finite() {
        let location = g.first_non_finite().unwrap_or_else(|| "loss".into());
        return Err(LatteError::NonFiniteLoss { step, location });
    }
    let grads = g.tape.backward(loss, loss_scale)?;
    if let Some((name, _)) = grads.by_name.iter().find(|(_, t)| !t.all_finite()) {
        return Err(LatteError::NonFiniteLoss {
            step,
            location: format!("gradient of {name}"),
        });
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::build_model;

    fn toy(kind: MixerKind) -> ModelConfig {
        crate::gradcheck::gradcheck_config(kind)
    }

    fn tokens(n: usize, vocab: usize, salt: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 5 + salt * 3 + i * i) % vocab).collect()
    }

    #[test]
    fn eval_forward_is_causal_for_every_mixer() {
        for kind in MixerKind::ALL {
            for plusplus in [true, false] {
                let cfg = ModelConfig { plusplus, ..toy(kind) };
                let store = build_model::<f64>(&cfg, 1).unwrap();
                let a = tokens(16, 7, 0);
                let base = forward_lm(&store, &cfg, &a, 2, 8, Pass::Eval).unwrap();
                for t in [0, 3, 7] {
                    let mut b = a.clone();
                    b[8 + t] = (b[8 + t] + 1) % 7;
                    let out = forward_lm(&store, &cfg, &b, 2, 8, Pass::Eval).unwrap();
                    let v = 7;
                    assert_eq!(&out.data()[..8 * v], &base.data()[..8 * v], "{kind} other row");
                    assert_eq!(
                        &out.data()[8 * v..(8 + t) * v],
                        &base.data()[8 * v..(8 + t) * v],
                        "{kind} t={t}"
                    );
                    assert_ne!(out.data()[(8 + t) * v..], base.data()[(8 + t) * v..]);
                }
            }
        }
    }

    #[test]
    fn zero_layers_is_head_of_normed_embedding() {
        let cfg = ModelConfig {
            n_layers: 0,
            ..toy(MixerKind::Latte)
        };
        let store = build_model::<f64>(&cfg, 2).unwrap();
        assert!(store.names().all(|n| !n.starts_with("layers.")));
        let ids = [3usize, 0, 6];
        let out = forward_lm(&store, &cfg, &ids, 1, 3, Pass::Eval).unwrap();
        let emb = store.get("embed.tokens").unwrap();
        let gain = store.get("final_norm.gain").unwrap();
        let head = store.get("head.w").unwrap();
        for (t, &id) in ids.iter().enumerate() {
            let row = &emb.data()[id * 8..(id + 1) * 8];
            let rms = (row.iter().map(|x| x * x).sum::<f64>() / 8.0 + cfg.norm_eps).sqrt();
            for v in 0..7 {
                let want: f64 = (0..8)
                    .map(|j| row[j] / rms * gain.data()[j] * head.data()[j * 7 + v])
                    .sum();
                assert!((out.data()[t * 7 + v] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_and_eval_determinism() {
        let cfg = toy(MixerKind::MacchiatoRglru);
        let store = build_model::<f32>(&cfg, 0).unwrap();
        let a = forward_lm(&store, &cfg, &[4], 1, 1, Pass::Eval).unwrap();
        assert_eq!(a.shape(), &[1, 1, 7]);
        assert!(a.all_finite());
        let b = forward_lm(&store, &cfg, &[4], 1, 1, Pass::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_range_tokens_and_long_position_tables() {
        let cfg = toy(MixerKind::Latte);
        let store = build_model::<f32>(&cfg, 0).unwrap();
        assert!(matches!(
            forward_lm(&store, &cfg, &[1, 7], 1, 2, Pass::Eval),
            Err(LatteError::TokenOutOfRange { id: 7, vocab: 7 })
        ));
        let cfg = ModelConfig {
            learned_positions: true,
            seq_len: 4,
            ..toy(MixerKind::Attention)
        };
        let store = build_model::<f32>(&cfg, 0).unwrap();
        forward_lm(&store, &cfg, &[1; 4], 1, 4, Pass::Eval).unwrap();
        assert!(matches!(
            forward_lm(&store, &cfg, &[1; 5], 1, 5, Pass::Eval),
            Err(LatteError::PositionTableExceeded { len: 5, table: 4 })
        ));
    }

    #[test]
    fn dropout_masks_depend_on_step_only_in_training() {
        let cfg = ModelConfig {
            dropout: 0.3,
            ..toy(MixerKind::Latte)
        };
        let store = build_model::<f64>(&cfg, 0).unwrap();
        let ids = tokens(8, 7, 1);
        let run = |pass| forward_lm(&store, &cfg, &ids, 1, 8, pass).unwrap();
        assert_eq!(run(Pass::Train { step: 3 }), run(Pass::Train { step: 3 }));
        assert_ne!(run(Pass::Train { step: 3 }), run(Pass::Train { step: 4 }));
        assert_ne!(run(Pass::Train { step: 3 }), run(Pass::Eval));
        assert_ne!(dropout_seed(0, 1, 0, 1), dropout_seed(0, 1, 1, 0));
    }

    #[test]
    fn latent_usage_is_a_distribution_per_head() {
        for (kind, width) in [(MixerKind::Latte, 2), (MixerKind::MacchiatoConv, 3)] {
            let cfg = toy(kind);
            let store = build_model::<f64>(&cfg, 0).unwrap();
            let usage = latent_usage(&store, &cfg, &tokens(8, 7, 0), 1, 8).unwrap();
            assert_eq!(usage.len(), 2);
            assert_eq!(usage[0].shape(), &[1, 8, 2, width]);
            for row in usage[1].data().chunks(width) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let cfg = toy(MixerKind::Swa);
        let store = build_model::<f64>(&cfg, 0).unwrap();
        assert!(latent_usage(&store, &cfg, &[1], 1, 1).is_err());
    }

    #[test]
    fn masked_out_batch_has_zero_loss_and_gradients() {
        let cfg = toy(MixerKind::Swa);
        let store = build_model::<f64>(&cfg, 0).unwrap();
        let ids = tokens(8, 7, 2);
        let batch = TokenBatch::new(ids.clone(), ids, vec![false; 8], 1, 8).unwrap();
        let (loss, grads) =
            loss_and_grads(&store, &cfg, &batch, Pass::Train { step: 0 }, 1.0, &mut Tape::new(true)).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.by_name.len(), store.len());
        assert!(grads.by_name.values().all(|g| g.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn loss_scale_scales_gradients() {
        let cfg = toy(MixerKind::MacchiatoConv);
        let store = build_model::<f64>(&cfg, 0).unwrap();
        let batch = TokenBatch::next_token(&[tokens(9, 7, 0), tokens(9, 7, 4)]).unwrap();
        let pass = Pass::Train { step: 0 };
        let (l1, g1) = loss_and_grads(&store, &cfg, &batch, pass, 1.0, &mut Tape::new(true)).unwrap();
        let (l2, g2) = loss_and_grads(&store, &cfg, &batch, pass, 2.0, &mut Tape::new(true)).unwrap();
        assert_eq!(l1, l2);
        for (name, g) in &g1.by_name {
            let h = &g2.by_name[name];
            for (a, b) in g.data().iter().zip(h.data()) {
                assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0), "{name}");
            }
        }
    }

    #[test]
    fn non_finite_activations_name_the_layer() {
        let cfg = toy(MixerKind::Latte);
        let mut store = build_model::<f64>(&cfg, 0).unwrap();
        store.get_mut("layers.1.ffn.w_down").unwrap().data_mut()[0] = f64::INFINITY;
        let batch = TokenBatch::next_token(&[tokens(9, 7, 0)]).unwrap();
        let err = loss_and_grads(&store, &cfg, &batch, Pass::Train { step: 5 }, 1.0, &mut Tape::new(true))
            .unwrap_err();
        match err {
            LatteError::NonFiniteLoss { step, location } => {
                assert_eq!(step, 5);
                assert_eq!(location, "layers.1.ffn");
            }
            e => panic!("unexpected {e}"),
        }
    }
}
