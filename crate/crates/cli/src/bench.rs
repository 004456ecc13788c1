//! Forward-only timing of the sequence-mixing cores on pre-projected
//! inputs, with the token budget held fixed across lengths.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use latte::attention::kernel::{attention_forward, HeadDims};
use latte::latte::kernel::{head_softmax, latent_scan, ScanDims};
use latte::linear::{linear_recurrent_kernel, LinearDims};
use latte::{MaskMode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMixer {
    /// Causal softmax attention over the full prefix.
    Attention,
    Swa,
    Linear,
    /// Stabilized latent scan.
    Latte,
}

impl BenchMixer {
    pub fn name(self) -> &'static str {
        match self {
            BenchMixer::Attention => "attention",
            BenchMixer::Swa => "swa",
            BenchMixer::Linear => "linear",
            BenchMixer::Latte => "latte",
        }
    }
}

impl std::str::FromStr for BenchMixer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [BenchMixer::Attention, BenchMixer::Swa, BenchMixer::Linear, BenchMixer::Latte]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown bench mixer `{s}` (expected attention, swa, linear or latte)"))
    }
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub seq_lens: Vec<usize>,
    pub mixers: Vec<BenchMixer>,
    pub d_model: usize,
    pub heads: usize,
    pub latents: usize,
    pub window: usize,
    /// Tokens per forward call; defaults to the longest length.
    pub token_budget: Option<usize>,
    pub repeat: usize,
    pub warmup: usize,
    pub max_memory_mb: usize,
    pub seed: u64,
}

impl Default for BenchArgs {
    fn default() -> Self {
        Self {
            seq_lens: vec![512, 1024, 2048, 4096, 8192],
            mixers: vec![BenchMixer::Latte, BenchMixer::Attention],
            d_model: 256,
            heads: 4,
            latents: 64,
            window: 128,
            token_budget: None,
            repeat: 3,
            warmup: 1,
            max_memory_mb: 4096,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mixer: BenchMixer,
    pub seq_len: usize,
    pub batch: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log median time against log T per mixer.
    pub slopes: Vec<(BenchMixer, f64)>,
    pub digest: String,
}

/// Working-set bytes of one forward call in 32-bit floats.
pub fn memory_estimate(args: &BenchArgs, mixer: BenchMixer, seq: usize, batch: usize) -> usize {
    let tokens = seq * batch;
    let io = 4 * tokens * args.d_model;
    let extra = match mixer {
        BenchMixer::Attention => seq * seq + 4 * seq * args.d_model / args.heads,
        BenchMixer::Swa => tokens * args.heads * (args.window + 1),
        BenchMixer::Linear | BenchMixer::Latte => 2 * tokens * args.latents,
    };
    (io + extra) * std::mem::size_of::<f32>()
}

fn validate(args: &BenchArgs) -> CliResult<usize> {
    let usage = |m: String| Err(CliError::Usage(m));
    if args.seq_lens.is_empty() || args.seq_lens.contains(&0) {
        return usage("sequence lengths must be positive".into());
    }
    if args.mixers.is_empty() {
        return usage("no mixers selected".into());
    }
    if args.repeat == 0 {
        return usage("repeat must be at least 1".into());
    }
    if args.heads == 0 || args.d_model % args.heads != 0 || args.latents % args.heads != 0 || args.latents == 0 {
        return usage(format!(
            "heads = {} must divide d_model = {} and latents = {}",
            args.heads, args.d_model, args.latents
        ));
    }
    let budget = args.token_budget.unwrap_or(*args.seq_lens.iter().max().unwrap());
    if let Some(&t) = args.seq_lens.iter().find(|&&t| budget % t != 0) {
        return usage(format!("token budget {budget} is not a multiple of T = {t}"));
    }
    let limit = args.max_memory_mb << 20;
    for &m in &args.mixers {
        for &t in &args.seq_lens {
            let need = memory_estimate(args, m, t, budget / t);
            if need > limit {
                return usage(format!(
                    "{} at T = {t} needs about {} MiB, above the {} MiB limit",
                    m.name(),
                    need >> 20,
                    args.max_memory_mb
                ));
            }
        }
    }
    Ok(budget)
}

struct Inputs {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

fn inputs(args: &BenchArgs, mixer: BenchMixer, seq: usize, batch: usize) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ seq as u64);
    let tokens = seq * batch;
    let qk_width = match mixer {
        BenchMixer::Attention | BenchMixer::Swa => args.d_model,
        BenchMixer::Linear | BenchMixer::Latte => args.latents,
    };
    let mut draw = |n: usize, std: f64| Tensor::<f32>::randn(&[n], std, &mut rng).into_data();
    Inputs {
        q: draw(tokens * qk_width, 0.5),
        k: draw(tokens * qk_width, 0.5),
        v: draw(tokens * args.d_model, 1.0),
    }
}

fn forward(args: &BenchArgs, mixer: BenchMixer, seq: usize, batch: usize, x: &Inputs) -> CliResult<f32> {
    let heads = args.heads;
    let d_head = args.d_model / heads;
    let out = match mixer {
        BenchMixer::Attention | BenchMixer::Swa => {
            let dims = HeadDims {
                batch,
                seq,
                heads,
                d_qk: d_head,
                d_v: d_head,
            };
            let mask = match mixer {
                BenchMixer::Swa => MaskMode::Window(args.window),
                _ => MaskMode::Causal,
            };
            attention_forward(&x.q, &x.k, &x.v, dims, mask, true, false).0
        }
        BenchMixer::Linear => {
            let dims = LinearDims {
                batch,
                seq,
                heads,
                features: args.latents / heads,
                d_v: d_head,
            };
            linear_recurrent_kernel(&x.q, &x.k, &x.v, dims)?
        }
        BenchMixer::Latte => {
            let slots = args.latents / heads;
            let dims = ScanDims {
                batch,
                seq,
                heads,
                slots,
                d_v: d_head,
            };
            let mut probs = x.q.clone();
            head_softmax(&mut probs, slots);
            latent_scan(&probs, &x.k, &x.v, dims, 32)
        }
    };
    Ok(out[out.len() / 2])
}

fn stats(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = if samples.len() < 2 {
        0.0
    } else {
        (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    (mean, std, median)
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        f64::NAN
    } else {
        sxy / sxx
    }
}

fn digest(args: &BenchArgs, budget: usize) -> String {
    let mixers: Vec<&str> = args.mixers.iter().map(|m| m.name()).collect();
    let key = format!(
        "seq_lens={:?};mixers={};d_model={};heads={};latents={};window={};budget={budget};repeat={};warmup={};seed={}",
        args.seq_lens,
        mixers.join(","),
        args.d_model,
        args.heads,
        args.latents,
        args.window,
        args.repeat,
        args.warmup,
        args.seed
    );
    hex::encode(Sha256::digest(key.as_bytes()))
}

/// Per-sequence times: each call processes `budget / T` sequences, and the
/// reported figures divide the call time by that batch.
pub fn run_bench(args: &BenchArgs) -> CliResult<BenchReport> {
    let budget = validate(args)?;
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    let mut sink = 0.0f32;
    for &mixer in &args.mixers {
        let mut points = Vec::new();
        for &seq in &args.seq_lens {
            let batch = budget / seq;
            let x = inputs(args, mixer, seq, batch);
            for _ in 0..args.warmup {
                sink += forward(args, mixer, seq, batch, &x)?;
            }
            let mut samples = Vec::with_capacity(args.repeat);
            for _ in 0..args.repeat {
                let start = Instant::now();
                sink += forward(args, mixer, seq, batch, &x)?;
                samples.push(start.elapsed().as_secs_f64() * 1e3 / batch as f64);
            }
            let (mean_ms, std_ms, median_ms) = stats(&samples);
            points.push((seq as f64, median_ms));
            rows.push(BenchRow {
                mixer,
                seq_len: seq,
                batch,
                mean_ms,
                std_ms,
                median_ms,
            });
        }
        slopes.push((mixer, log_log_slope(&points)));
    }
    std::hint::black_box(sink);
    Ok(BenchReport {
        rows,
        slopes,
        digest: digest(args, budget),
    })
}

pub fn bench_csv(report: &BenchReport) -> String {
    let mut s = format!(
        "# config_digest={}\nmixer,T,batch,mean_ms,std_ms,median_ms,slope\n",
        report.digest
    );
    for r in &report.rows {
        let slope = report.slopes.iter().find(|p| p.0 == r.mixer).map_or(f64::NAN, |p| p.1);
        writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.4}",
            r.mixer.name(),
            r.seq_len,
            r.batch,
            r.mean_ms,
            r.std_ms,
            r.median_ms,
            slope
        )
        .unwrap();
    }
    s
}

pub fn cmd_bench(args: &BenchArgs, csv_path: Option<&std::path::Path>, out: &mut dyn Write) -> CliResult<BenchReport> {
    let report = run_bench(args)?;
    let csv = bench_csv(&report);
    match csv_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, &csv)?;
        }
        None => out.write_all(csv.as_bytes())?,
    }
    for (m, slope) in &report.slopes {
        writeln!(out, "slope {} {slope:.3}", m.name())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchArgs {
        BenchArgs {
            seq_lens: vec![16, 32, 64],
            mixers: vec![BenchMixer::Attention, BenchMixer::Swa, BenchMixer::Linear, BenchMixer::Latte],
            d_model: 16,
            heads: 2,
            latents: 8,
            window: 4,
            repeat: 1,
            warmup: 0,
            ..Default::default()
        }
    }

    #[test]
    fn schema_and_single_repeat() {
        let r = run_bench(&tiny()).unwrap();
        assert_eq!(r.rows.len(), 12);
        assert!(r.rows.iter().all(|row| row.std_ms == 0.0 && row.batch * row.seq_len == 64));
        let csv = bench_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# config_digest="));
        assert_eq!(lines[1], "mixer,T,batch,mean_ms,std_ms,median_ms,slope");
        assert_eq!(lines.len(), 14);
        let again = bench_csv(&run_bench(&tiny()).unwrap());
        assert_eq!(again.lines().nth(1), lines.get(1).copied());
        assert_eq!(again.lines().next(), lines.first().copied());
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [512.0, 1024.0, 4096.0].iter().map(|&t: &f64| (t, 3.0 * t.powf(1.7))).collect();
        assert!((log_log_slope(&pts) - 1.7).abs() < 1e-12);
        assert_eq!(stats(&[1.0, 3.0]), (2.0, 2f64.sqrt(), 2.0));
    }

    #[test]
    fn rejects_bad_requests() {
        let mut a = tiny();
        a.seq_lens = vec![16, 24];
        assert!(run_bench(&a).is_err());
        let mut a = tiny();
        a.seq_lens = vec![1 << 20];
        a.mixers = vec![BenchMixer::Attention];
        let err = run_bench(&a).unwrap_err().to_string();
        assert!(err.contains("MiB"), "{err}");
        let mut a = tiny();
        a.repeat = 0;
        assert!(run_bench(&a).is_err());
    }
}
