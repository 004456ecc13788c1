//! Reverse-mode gradients against central finite differences on a toy model.

use latte::numerics::{finite_difference_gradient, relative_error};
use latte::{LatteError, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MixerKind, ModelConfig};
use crate::forward::{loss_and_grads, Pass, TokenBatch};
use crate::params::build_model;
use crate::tape::Tape;

/// Two-layer, T = 8 configuration small enough for per-element differences.
pub fn gradcheck_config(kind: MixerKind) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        n_latents: 4,
        window: 3,
        conv_kernel: 2,
        mixer_kind: kind,
        vocab_size: 7,
        seq_len: 8,
        unroll: 3,
        dropout: 0.0,
        ..Default::default()
    }
}

fn toy_tokens(n: usize, vocab: usize, salt: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 5 + salt * 3 + i * i) % vocab).collect()
}

/// Relative error per parameter tensor, in store order. Weights are
/// perturbed by U(-0.3, 0.3) first so every path carries signal.
pub fn gradient_check(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<Vec<(String, f64)>> {
    let mut store = build_model::<f64>(cfg, seed)?;
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for n in &names {
        if n.ends_with("rglru_log_decay") {
            continue;
        }
        if let Some(t) = store.get_mut(n) {
            for x in t.data_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let (b, t, v) = (2, cfg.seq_len, cfg.vocab_size);
    let mut mask = vec![true; b * t];
    mask[3] = false;
    let batch = TokenBatch::new(toy_tokens(b * t, v, 1), toy_tokens(b * t, v, 6), mask, b, t)?;
    let pass = Pass::Train { step: 0 };
    let (_, grads) = loss_and_grads(&store, cfg, &batch, pass, 1.0, &mut Tape::new(true))?;
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let base = store.get(&name)?.clone();
        let fd = finite_difference_gradient(
            |p: &Tensor<f64>| {
                let mut s = store.clone();
                if let Some(slot) = s.get_mut(&name) {
                    *slot = p.clone();
                }
                loss_and_grads(&s, cfg, &batch, pass, 1.0, &mut Tape::new(true)).map(|r| r.0)
            },
            &base,
            eps,
        )?;
        let analytic = grads
            .get(&name)
            .ok_or_else(|| LatteError::InvalidArgument(format!("no gradient for {name}")))?;
        let err = relative_error(analytic, &fd);
        out.push((name, err));
    }
    Ok(out)
}
