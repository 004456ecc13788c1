//! Multi-query associative recall: `N` key/value pairs, then the keys
//! queried again in random order at random later positions.

use std::fs;
use std::path::{Path, PathBuf};

use latte::{LatteError, Result, Scalar};
use latte_model::{forward_lm, ModelConfig, ParameterStore, Pass, TokenBatch};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MqarConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_pairs: usize,
    pub seed: u64,
    pub train_examples: usize,
    pub test_examples: usize,
}

impl Default for MqarConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 64,
            num_pairs: 4,
            seed: 0,
            train_examples: 100_000,
            test_examples: 10_000,
        }
    }
}

/// Default `(seq_len, num_pairs)` grid.
pub const DEFAULT_GRID: [(usize, usize); 3] = [(64, 4), (128, 8), (256, 16)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl MqarConfig {
    /// Token id used for padding between queries; keys are `[0, V/2)`,
    /// values `[V/2, V)`.
    pub fn filler(&self) -> usize {
        self.vocab_size
    }

    /// Vocabulary a model needs: the `V` task symbols plus the filler.
    pub fn model_vocab(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (v, t, n) = (self.vocab_size, self.seq_len, self.num_pairs);
        if n == 0 || v < 2 || v % 2 != 0 {
            return Err(LatteError::InvalidConfig(format!(
                "need at least one pair and an even vocabulary, got N = {n}, V = {v}"
            )));
        }
        if n > v / 2 {
            return Err(LatteError::InfeasiblePacking(format!(
                "{n} distinct keys do not fit a key alphabet of {}",
                v / 2
            )));
        }
        if 3 * n > t {
            return Err(LatteError::InfeasiblePacking(format!(
                "{n} pairs and {n} queries need {} positions, T = {t}",
                3 * n
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn rng_for(&self, stream: u64, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&stream.to_le_bytes());
        key[16..24].copy_from_slice(&index.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MqarExample {
    pub tokens: Vec<usize>,
    /// Expected output at each position; meaningful where `target_mask`.
    pub targets: Vec<usize>,
    pub target_mask: Vec<bool>,
}

impl MqarExample {
    pub fn query_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.tokens.len()).filter(|&i| self.target_mask[i])
    }
}

/// Deterministic example `index` of `split`.
pub fn mqar_example(cfg: &MqarConfig, split: Split, index: usize) -> Result<MqarExample> {
    cfg.validate()?;
    let mut rng = cfg.rng_for(split.id(), index as u64);
    let (t, n, half) = (cfg.seq_len, cfg.num_pairs, cfg.vocab_size / 2);
    let keys: Vec<usize> = index::sample(&mut rng, half, n).into_vec();
    let values: Vec<usize> = (0..n).map(|_| half + rng.gen_range(0..half)).collect();
    let mut tokens = vec![cfg.filler(); t];
    let mut targets = vec![0; t];
    let mut target_mask = vec![false; t];
    for i in 0..n {
        tokens[2 * i] = keys[i];
        tokens[2 * i + 1] = values[i];
    }
    let mut slots: Vec<usize> = index::sample(&mut rng, t - 2 * n, n)
        .into_iter()
        .map(|p| p + 2 * n)
        .collect();
    slots.sort_unstable();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for (&pos, &pair) in slots.iter().zip(&order) {
        tokens[pos] = keys[pair];
        targets[pos] = values[pair];
        target_mask[pos] = true;
    }
    Ok(MqarExample {
        tokens,
        targets,
        target_mask,
    })
}

/// The first `train_examples` or `test_examples` examples of a split.
pub fn generate_mqar(cfg: &MqarConfig, split: Split) -> Result<Vec<MqarExample>> {
    let n = match split {
        Split::Train => cfg.train_examples,
        Split::Test => cfg.test_examples,
    };
    (0..n).map(|i| mqar_example(cfg, split, i)).collect()
}

/// Value bound to the most recent earlier occurrence of the key at `pos`.
pub fn recall(example: &MqarExample, pos: usize, half: usize) -> Option<usize> {
    let key = example.tokens[pos];
    (0..pos.saturating_sub(1))
        .rev()
        .find(|&i| example.tokens[i] == key && example.tokens[i + 1] >= half)
        .map(|i| example.tokens[i + 1])
}

/// Training batch for `step`: examples drawn from the training split by a
/// per-step stream.
pub fn mqar_batch(cfg: &MqarConfig, examples: &[MqarExample], step: usize, batch: usize) -> Result<TokenBatch> {
    if examples.is_empty() {
        return Err(LatteError::EmptyInput("no training examples".into()));
    }
    let mut rng = cfg.rng_for(3, step as u64);
    let picked: Vec<&MqarExample> = (0..batch)
        .map(|_| &examples[rng.gen_range(0..examples.len())])
        .collect();
    to_token_batch(&picked)
}

pub fn to_token_batch(examples: &[&MqarExample]) -> Result<TokenBatch> {
    let seq = examples.first().map_or(0, |e| e.tokens.len());
    TokenBatch::new(
        examples.iter().flat_map(|e| e.tokens.iter().copied()).collect(),
        examples.iter().flat_map(|e| e.targets.iter().copied()).collect(),
        examples.iter().flat_map(|e| e.target_mask.iter().copied()).collect(),
        examples.len(),
        seq,
    )
}

/// Fraction of query positions where `predictions` hits the target.
pub fn query_accuracy(examples: &[MqarExample], predictions: &[Vec<usize>]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (e, p) in examples.iter().zip(predictions) {
        for i in e.query_positions() {
            total += 1;
            hit += (p[i] == e.targets[i]) as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Argmax accuracy of a model over query positions, evaluated `batch`
/// examples at a time.
pub fn evaluate_mqar<T: Scalar>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    examples: &[MqarExample],
    batch: usize,
) -> Result<f64> {
    let mut predictions = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch.max(1)) {
        let seq = chunk[0].tokens.len();
        let ids: Vec<usize> = chunk.iter().flat_map(|e| e.tokens.iter().copied()).collect();
        let logits = forward_lm(store, cfg, &ids, chunk.len(), seq, Pass::Eval)?;
        let v = logits.dim(2);
        for (b, e) in chunk.iter().enumerate() {
            let mut pred = vec![usize::MAX; seq];
            for i in e.query_positions() {
                let row = &logits.data()[(b * seq + i) * v..(b * seq + i + 1) * v];
                pred[i] = argmax(row);
            }
            predictions.push(pred);
        }
    }
    Ok(query_accuracy(examples, &predictions))
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

const CACHE_MAGIC: &[u8; 5] = b"MQAR1";

pub fn cache_path(dir: &Path, cfg: &MqarConfig, split: Split) -> PathBuf {
    dir.join(format!("mqar-{}-{}.bin", &cfg.digest()[..16], split.name()))
}

/// Header (magic, config digest, count, length), then per example packed
/// little-endian `i32` tokens, a bitmask and `i32` targets.
pub fn write_cache(path: &Path, cfg: &MqarConfig, examples: &[MqarExample]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(cfg.digest().as_bytes());
    out.extend_from_slice(&(examples.len() as u64).to_le_bytes());
    out.extend_from_slice(&(cfg.seq_len as u64).to_le_bytes());
    for e in examples {
        for &t in &e.tokens {
            out.extend_from_slice(&(t as i32).to_le_bytes());
        }
        for bits in e.target_mask.chunks(8) {
            out.push(bits.iter().enumerate().fold(0u8, |b, (i, &m)| b | ((m as u8) << i)));
        }
        for &t in &e.targets {
            out.extend_from_slice(&(t as i32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_cache(path: &Path, cfg: &MqarConfig) -> Result<Vec<MqarExample>> {
    let buf = fs::read(path)?;
    let bad = |m: &str| LatteError::Format(format!("{}: {m}", path.display()));
    let digest = cfg.digest();
    let head = CACHE_MAGIC.len() + digest.len();
    if buf.len() < head + 16 || &buf[..5] != CACHE_MAGIC {
        return Err(bad("not an MQAR cache"));
    }
    if &buf[5..head] != digest.as_bytes() {
        return Err(bad("config digest mismatch"));
    }
    let count = u64::from_le_bytes(buf[head..head + 8].try_into().unwrap()) as usize;
    let t = u64::from_le_bytes(buf[head + 8..head + 16].try_into().unwrap()) as usize;
    let per = 8 * t + t.div_ceil(8);
    let body = &buf[head + 16..];
    if body.len() != count * per {
        return Err(bad("truncated"));
    }
    let ints = |s: &[u8]| -> Vec<usize> {
        s.chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect()
    };
    Ok(body
        .chunks_exact(per)
        .map(|rec| {
            let mask_bytes = &rec[4 * t..4 * t + t.div_ceil(8)];
            MqarExample {
                tokens: ints(&rec[..4 * t]),
                target_mask: (0..t).map(|i| mask_bytes[i / 8] >> (i % 8) & 1 == 1).collect(),
                targets: ints(&rec[4 * t + t.div_ceil(8)..]),
            }
        })
        .collect())
}

/// Load a split from `dir`, generating and caching it when absent.
pub fn cached_split(dir: &Path, cfg: &MqarConfig, split: Split) -> Result<Vec<MqarExample>> {
    let path = cache_path(dir, cfg, split);
    if path.exists() {
        return read_cache(&path, cfg);
    }
    let examples = generate_mqar(cfg, split)?;
    write_cache(&path, cfg, &examples)?;
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use latte_model::{build_model, MixerKind};

    fn small(n: usize, t: usize) -> MqarConfig {
        MqarConfig {
            num_pairs: n,
            seq_len: t,
            train_examples: 50,
            test_examples: 20,
            ..Default::default()
        }
    }

    #[test]
    fn single_pair_has_one_query_with_its_value() {
        let cfg = small(1, 8);
        for i in 0..20 {
            let e = mqar_example(&cfg, Split::Train, i).unwrap();
            let q: Vec<usize> = e.query_positions().collect();
            assert_eq!(q.len(), 1);
            assert!(q[0] >= 2);
            assert_eq!(e.tokens[q[0]], e.tokens[0]);
            assert_eq!(e.targets[q[0]], e.tokens[1]);
        }
    }

    #[test]
    fn every_query_is_recoverable_from_its_prefix() {
        for (t, n) in DEFAULT_GRID {
            let cfg = small(n, t);
            for split in [Split::Train, Split::Test] {
                for e in generate_mqar(&cfg, split).unwrap() {
                    assert_eq!(e.query_positions().count(), n);
                    let mut keys: Vec<usize> = (0..n).map(|i| e.tokens[2 * i]).collect();
                    keys.sort_unstable();
                    keys.dedup();
                    assert_eq!(keys.len(), n);
                    for p in e.query_positions() {
                        assert!(p >= 2 * n);
                        assert_eq!(recall(&e, p, 32), Some(e.targets[p]));
                    }
                    for (i, &tok) in e.tokens.iter().enumerate() {
                        if i >= 2 * n && !e.target_mask[i] {
                            assert_eq!(tok, cfg.filler());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn streams_are_pure_functions_of_the_seed() {
        let cfg = small(4, 64);
        assert_eq!(generate_mqar(&cfg, Split::Train).unwrap(), generate_mqar(&cfg, Split::Train).unwrap());
        assert_ne!(generate_mqar(&cfg, Split::Train).unwrap(), generate_mqar(&cfg, Split::Test).unwrap());
        let other = MqarConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_mqar(&cfg, Split::Test).unwrap(), generate_mqar(&other, Split::Test).unwrap());
        let ex = generate_mqar(&cfg, Split::Train).unwrap();
        assert_eq!(mqar_batch(&cfg, &ex, 3, 4).unwrap(), mqar_batch(&cfg, &ex, 3, 4).unwrap());
        assert_ne!(mqar_batch(&cfg, &ex, 3, 4).unwrap(), mqar_batch(&cfg, &ex, 4, 4).unwrap());
    }

    #[test]
    fn infeasible_layouts_are_rejected() {
        assert!(matches!(mqar_example(&small(3, 8), Split::Train, 0), Err(LatteError::InfeasiblePacking(_))));
        let many = MqarConfig { vocab_size: 6, ..small(4, 64) };
        assert!(matches!(mqar_example(&many, Split::Train, 0), Err(LatteError::InfeasiblePacking(_))));
        mqar_example(&small(2, 6), Split::Train, 0).unwrap();
    }

    #[test]
    fn key_and_value_histograms_are_uniform() {
        let cfg = MqarConfig { test_examples: 10_000, ..small(4, 64) };
        let ex = generate_mqar(&cfg, Split::Test).unwrap();
        let mut keys = [0f64; 32];
        let mut vals = [0f64; 32];
        for e in &ex {
            for i in 0..4 {
                keys[e.tokens[2 * i]] += 1.0;
                vals[e.tokens[2 * i + 1] - 32] += 1.0;
            }
        }
        let draws = 40_000.0;
        let p: f64 = 1.0 / 32.0;
        let sigma = (draws * p * (1.0 - p)).sqrt();
        for c in keys.iter().chain(&vals) {
            assert!((c - draws * p).abs() <= 3.0 * sigma, "{c} vs {}", draws * p);
        }
    }

    #[test]
    fn oracle_is_perfect_and_shuffled_labels_are_at_chance() {
        let cfg = MqarConfig { test_examples: 2500, ..small(4, 64) };
        let ex = generate_mqar(&cfg, Split::Test).unwrap();
        let oracle: Vec<Vec<usize>> = ex
            .iter()
            .map(|e| (0..64).map(|p| recall(e, p, 32).unwrap_or(cfg.filler())).collect())
            .collect();
        assert_eq!(query_accuracy(&ex, &oracle), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut labels: Vec<usize> = ex.iter().flat_map(|e| e.query_positions().map(|p| e.targets[p])).collect();
        labels.shuffle(&mut rng);
        let mut shuffled = ex.clone();
        let mut it = labels.into_iter();
        for e in &mut shuffled {
            let qs: Vec<usize> = e.query_positions().collect();
            for p in qs {
                e.targets[p] = it.next().unwrap();
            }
        }
        let acc = query_accuracy(&shuffled, &oracle);
        let (n, p) = (10_000.0, 1.0 / 32.0);
        assert!((acc - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "{acc}");
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let task = MqarConfig { test_examples: 2500, ..small(4, 64) };
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            n_latents: 8,
            window: 8,
            mixer_kind: MixerKind::MacchiatoRglru,
            vocab_size: task.model_vocab(),
            seq_len: 64,
            ..Default::default()
        };
        let store = build_model::<f32>(&cfg, 0).unwrap();
        let ex = generate_mqar(&task, Split::Test).unwrap();
        let acc = evaluate_mqar(&store, &cfg, &ex, 64).unwrap();
        assert!((acc - 1.0 / 64.0).abs() <= 0.02, "{acc}");
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(3, 21);
        let a = cached_split(dir.path(), &cfg, Split::Train).unwrap();
        assert!(cache_path(dir.path(), &cfg, Split::Train).exists());
        let b = cached_split(dir.path(), &cfg, Split::Train).unwrap();
        assert_eq!(a, b);
        let other = MqarConfig { seed: 9, ..cfg.clone() };
        assert!(read_cache(&cache_path(dir.path(), &cfg, Split::Train), &other).is_err());
    }
}
