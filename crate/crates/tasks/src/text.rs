//! Byte-level text: corpus loading, a synthetic English-like generator and
//! perplexity evaluation at several lengths.

use std::fmt::Write as _;
use std::path::Path;

use latte::{LatteError, Result, Scalar};
use latte_model::{forward_lm, ModelConfig, ParameterStore, Pass, TokenBatch};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(tokens: &[usize]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| LatteError::TokenOutOfRange {
                id: t,
                vocab: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Concatenated byte tokens cut into consecutive `seq_len` chunks; a
/// shorter tail is dropped, nothing is padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextCorpus {
    pub tokens: Vec<usize>,
    pub seq_len: usize,
}

impl TextCorpus {
    pub fn from_bytes(bytes: &[u8], seq_len: usize) -> Result<Self> {
        if bytes.is_empty() {
            return Err(LatteError::EmptyInput("corpus has no bytes".into()));
        }
        if seq_len == 0 {
            return Err(LatteError::InvalidArgument("seq_len must be positive".into()));
        }
        Ok(Self {
            tokens: tokenize(bytes),
            seq_len,
        })
    }

    pub fn chunks(&self) -> impl Iterator<Item = &[usize]> {
        self.tokens.chunks_exact(self.seq_len)
    }

    pub fn num_chunks(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    /// Leading fraction for training, the rest held out.
    pub fn split(&self, held_out: f64) -> (Vec<usize>, Vec<usize>) {
        let cut = ((1.0 - held_out) * self.tokens.len() as f64).round() as usize;
        let cut = cut.min(self.tokens.len());
        (self.tokens[..cut].to_vec(), self.tokens[cut..].to_vec())
    }
}

pub fn load_text_corpus(path: &Path, seq_len: usize) -> Result<TextCorpus> {
    TextCorpus::from_bytes(&std::fs::read(path)?, seq_len)
}

const SUBJECTS: [&str; 12] = [
    "the farmer", "a small child", "the old sailor", "my neighbour", "the teacher", "a quiet dog",
    "the baker", "her brother", "the young queen", "a tired traveller", "the river", "our cat",
];
const VERBS: [&str; 12] = [
    "watched", "found", "carried", "painted", "followed", "remembered", "opened", "visited",
    "cleaned", "described", "lost", "built",
];
const OBJECTS: [&str; 12] = [
    "the red door", "a wooden boat", "the long road", "an empty basket", "the green hill",
    "a letter", "the bright window", "some warm bread", "the stone bridge", "a broken clock",
    "the garden", "two silver coins",
];
const TAILS: [&str; 8] = [
    "in the morning", "after the rain", "near the market", "before dinner", "with great care",
    "without a word", "at the edge of town", "during the winter",
];
const LINKS: [&str; 4] = ["and then", "because", "while", "so"];

/// Deterministic English-like text of at least `n_bytes` bytes built from a
/// small sentence grammar.
pub fn synthetic_corpus(seed: u64, n_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 128);
    let pick = |rng: &mut ChaCha8Rng, words: &[&'static str]| *words.choose(rng).unwrap();
    while out.len() < n_bytes {
        let mut sentence = format!("{} {} {}", pick(&mut rng, &SUBJECTS), pick(&mut rng, &VERBS), pick(&mut rng, &OBJECTS));
        if rng.gen_bool(0.5) {
            write!(sentence, " {}", pick(&mut rng, &TAILS)).unwrap();
        }
        if rng.gen_bool(0.3) {
            write!(
                sentence,
                ", {} {} {} {}",
                pick(&mut rng, &LINKS),
                pick(&mut rng, &SUBJECTS),
                pick(&mut rng, &VERBS),
                pick(&mut rng, &OBJECTS)
            )
            .unwrap();
        }
        let mut chars = sentence.chars();
        let first = chars.next().unwrap().to_ascii_uppercase();
        out.push(first);
        out.extend(chars);
        out.push_str(if rng.gen_bool(0.9) { ". " } else { "! " });
        if rng.gen_bool(0.1) {
            out.push('\n');
        }
    }
    out
}

/// `batch` random windows of `seq + 1` tokens for training `step`, drawn
/// from a stream keyed on `(seed, step)`.
pub fn text_batch(tokens: &[usize], seq: usize, batch: usize, seed: u64, step: usize) -> Result<TokenBatch> {
    if tokens.len() < seq + 1 {
        return Err(LatteError::EmptyInput(format!(
            "{} tokens do not fill one window of {}",
            tokens.len(),
            seq + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    let (mut ids, mut targets) = (Vec::with_capacity(batch * seq), Vec::with_capacity(batch * seq));
    for _ in 0..batch {
        let at = rng.gen_range(0..=tokens.len() - seq - 1);
        ids.extend_from_slice(&tokens[at..at + seq]);
        targets.extend_from_slice(&tokens[at + 1..at + seq + 1]);
    }
    TokenBatch::new(ids, targets, vec![true; batch * seq], batch, seq)
}

/// Perplexity of next-byte prediction over non-overlapping windows of
/// `len + 1` tokens (at most `max_windows`), `batch` windows per forward.
pub fn evaluate_perplexity<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    len: usize,
    batch: usize,
    max_windows: usize,
) -> Result<f64> {
    let windows: Vec<&[usize]> = tokens.chunks_exact(len + 1).take(max_windows).collect();
    if windows.is_empty() {
        return Err(LatteError::EmptyInput(format!(
            "{} tokens do not fill one window of {}",
            tokens.len(),
            len + 1
        )));
    }
    let (mut nll, mut count) = (0.0, 0usize);
    for group in windows.chunks(batch.max(1)) {
        let ids: Vec<usize> = group.iter().flat_map(|w| w[..len].iter().copied()).collect();
        let logits = forward_lm(store, cfg, &ids, group.len(), len, Pass::Eval)?;
        let v = logits.dim(2);
        for (b, w) in group.iter().enumerate() {
            for t in 0..len {
                let row = &logits.data()[(b * len + t) * v..(b * len + t + 1) * v];
                let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x.as_f64() - m).exp()).sum();
                nll += m + z.ln() - row[w[t + 1]].as_f64();
                count += 1;
            }
        }
    }
    let ppl = (nll / count as f64).exp();
    if !ppl.is_finite() {
        return Err(LatteError::NonFinite(format!("perplexity at length {len}")));
    }
    Ok(ppl)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrapolationRow {
    pub len: usize,
    pub ppl: f64,
}

/// Held-out perplexity at each evaluation length with the same token budget
/// (`budget` predicted tokens, rounded down to whole windows).
pub fn length_extrapolation_eval<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    held_out: &[usize],
    train_len: usize,
    eval_lens: &[usize],
    budget: usize,
) -> Result<Vec<ExtrapolationRow>> {
    if let Some(&short) = eval_lens.iter().find(|&&l| l < train_len) {
        return Err(LatteError::InvalidArgument(format!(
            "evaluation length {short} is shorter than the training length {train_len}"
        )));
    }
    eval_lens
        .iter()
        .map(|&len| {
            let windows = (budget / len).max(1);
            let batch = windows.min((4096 / len).max(1));
            let ppl = evaluate_perplexity(store, cfg, held_out, len, batch, windows)?;
            Ok(ExtrapolationRow { len, ppl })
        })
        .collect()
}

pub fn extrapolation_csv(rows: &[ExtrapolationRow], config_digest: &str) -> String {
    let mut s = format!("# config_digest={config_digest}\nlen,ppl\n");
    for r in rows {
        writeln!(s, "{},{}", r.len, r.ppl).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use latte_model::{build_model, MixerKind};

    #[test]
    fn exact_chunks_and_round_trip() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(64).collect();
        let c = TextCorpus::from_bytes(&bytes, 32).unwrap();
        assert_eq!(c.num_chunks(), 2);
        let chunks: Vec<&[usize]> = c.chunks().collect();
        assert_eq!(chunks[1][0], 32);
        let c2 = TextCorpus::from_bytes(&bytes[..63], 32).unwrap();
        assert_eq!(c2.num_chunks(), 1);
        assert_eq!(detokenize(&c.tokens).unwrap(), bytes);
        assert!(detokenize(&[256]).is_err());
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(load_text_corpus(&path, 8), Err(LatteError::EmptyInput(_))));
        std::fs::write(&path, b"hello world").unwrap();
        assert_eq!(load_text_corpus(&path, 4).unwrap().num_chunks(), 2);
    }

    #[test]
    fn text_batches_are_shifted_windows() {
        let tokens: Vec<usize> = (0..100).collect();
        let b = text_batch(&tokens, 8, 3, 1, 5).unwrap();
        for r in 0..3 {
            let row = &b.tokens[r * 8..(r + 1) * 8];
            assert!(row.windows(2).all(|w| w[1] == w[0] + 1));
            assert_eq!(b.targets[r * 8], row[0] + 1);
        }
        assert_eq!(b, text_batch(&tokens, 8, 3, 1, 5).unwrap());
        assert_ne!(b, text_batch(&tokens, 8, 3, 1, 6).unwrap());
        assert!(text_batch(&tokens[..8], 8, 1, 1, 0).is_err());
    }

    #[test]
    fn synthetic_text_is_deterministic_printable_ascii() {
        let a = synthetic_corpus(1, 5000);
        assert!(a.len() >= 5000);
        assert_eq!(a, synthetic_corpus(1, 5000));
        assert_ne!(a, synthetic_corpus(2, 5000));
        assert!(a.bytes().all(|b| b == b'\n' || (32..127).contains(&b)));
        assert!(a.contains(". "));
    }

    fn model(kind: MixerKind, learned: bool) -> (ModelConfig, ParameterStore<f32>) {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            n_latents: 8,
            window: 8,
            mixer_kind: kind,
            vocab_size: BYTE_VOCAB,
            seq_len: 16,
            learned_positions: learned,
            ..Default::default()
        };
        let store = build_model(&cfg, 0).unwrap();
        (cfg, store)
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let (cfg, store) = model(MixerKind::Latte, false);
        let text = tokenize(synthetic_corpus(0, 2000).as_bytes());
        let ppl = evaluate_perplexity(&store, &cfg, &text, 16, 8, 100).unwrap();
        assert!((ppl / 256.0 - 1.0).abs() < 0.1, "{ppl}");
    }

    #[test]
    fn extrapolation_rows() {
        let (cfg, store) = model(MixerKind::MacchiatoRglru, false);
        let text = tokenize(synthetic_corpus(3, 3000).as_bytes());
        let rows = length_extrapolation_eval(&store, &cfg, &text, 16, &[16, 64], 512).unwrap();
        let standard = evaluate_perplexity(&store, &cfg, &text, 16, 32, 32).unwrap();
        assert_eq!(rows[0].ppl, standard);
        assert!(rows[1].ppl.is_finite());
        assert!(length_extrapolation_eval(&store, &cfg, &text, 16, &[8], 512).is_err());
        let csv = extrapolation_csv(&rows, "d");
        assert_eq!(csv.lines().count(), 4);

        let (cfg, store) = model(MixerKind::Attention, true);
        assert!(matches!(
            length_extrapolation_eval(&store, &cfg, &text, 16, &[32], 512),
            Err(LatteError::PositionTableExceeded { len: 32, table: 16 })
        ));
    }
}
