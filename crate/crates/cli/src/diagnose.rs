//! Latent-state usage of a trained Latte-family model over one sequence.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use latte::{DType, Scalar, Tensor};
use latte_model::{latent_usage, read_header, Checkpoint};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct DiagnoseArgs {
    pub checkpoint: PathBuf,
    /// Whitespace-separated token ids, or raw bytes otherwise.
    pub input: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadUsage {
    pub layer: usize,
    pub head: usize,
    /// Entropy of the time-averaged state distribution.
    pub entropy: f64,
    /// `ln S` for `S` states.
    pub max_entropy: f64,
    pub collapsed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub heads: Vec<HeadUsage>,
    pub rows: usize,
    /// Largest deviation of any `sum_l p(l|t)` from one.
    pub max_row_deviation: f64,
}

/// Token ids from a file: integers when every field parses, bytes otherwise.
pub fn read_tokens(path: &Path) -> CliResult<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let ids: Option<Vec<usize>> = text.split_whitespace().map(|w| w.parse().ok()).collect();
    let tokens = match ids {
        Some(ids) if !ids.is_empty() => ids,
        _ => bytes.iter().map(|&b| b as usize).collect(),
    };
    if tokens.is_empty() {
        return Err(CliError::Usage(format!("{} holds no tokens", path.display())));
    }
    Ok(tokens)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn diagnose_typed<T: Scalar>(path: &Path, tokens: &[usize], csv: &mut String) -> CliResult<Diagnosis> {
    let ck = Checkpoint::<T>::load(path)?;
    let usage = latent_usage(&ck.store, &ck.config, tokens, 1, tokens.len())?;
    Ok(summarize(&usage, csv))
}

/// Appends `layer,head,t,l,p` rows and summarizes each head.
fn summarize<T: Scalar>(usage: &[Tensor<T>], csv: &mut String) -> Diagnosis {
    let mut heads = Vec::new();
    let (mut rows, mut worst) = (0, 0.0f64);
    for (layer, u) in usage.iter().enumerate() {
        let (seq, h_n, s_n) = (u.dim(1), u.dim(2), u.dim(3));
        for h in 0..h_n {
            let mut mean = vec![0.0; s_n];
            for t in 0..seq {
                let row = &u.data()[(t * h_n + h) * s_n..][..s_n];
                let mut sum = 0.0;
                for (l, p) in row.iter().enumerate() {
                    let p = p.as_f64();
                    writeln!(csv, "{layer},{h},{t},{l},{p:.9}").unwrap();
                    mean[l] += p / seq as f64;
                    sum += p;
                }
                rows += s_n;
                worst = worst.max((sum - 1.0).abs());
            }
            let e = entropy(&mean);
            let max_entropy = (s_n as f64).ln();
            heads.push(HeadUsage {
                layer,
                head: h,
                entropy: e,
                max_entropy,
                collapsed: e < 0.1 * max_entropy,
            });
        }
    }
    Diagnosis {
        heads,
        rows,
        max_row_deviation: worst,
    }
}

pub fn cmd_diagnose(args: &DiagnoseArgs, out: &mut dyn Write) -> CliResult<Diagnosis> {
    let header = read_header(&args.checkpoint)?;
    if !header.config.mixer_kind.has_latents() {
        return Err(CliError::Usage(format!(
            "checkpoint uses mixer `{}`, which has no latent states",
            header.config.mixer_kind
        )));
    }
    let tokens = read_tokens(&args.input)?;
    let mut csv = format!("# config_digest={}\nlayer,head,t,l,p\n", header.digest);
    let d = match header.dtype {
        DType::F32 => diagnose_typed::<f32>(&args.checkpoint, &tokens, &mut csv)?,
        DType::F64 => diagnose_typed::<f64>(&args.checkpoint, &tokens, &mut csv)?,
    };
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.out, csv)?;
    writeln!(out, "layer head entropy  max     collapse")?;
    for h in &d.heads {
        writeln!(
            out,
            "{:<5} {:<4} {:<7.4} {:<7.4} {}",
            h.layer,
            h.head,
            h.entropy,
            h.max_entropy,
            if h.collapsed { "yes" } else { "no" }
        )?;
    }
    let flagged = d.heads.iter().filter(|h| h.collapsed).count();
    writeln!(out, "{} rows, {flagged} collapse candidates", d.rows)?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use latte_model::{MixerKind, ModelConfig, Trainer};

    fn checkpoint(dir: &Path, kind: MixerKind) -> PathBuf {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            n_latents: 8,
            window: 4,
            vocab_size: 256,
            seq_len: 32,
            mixer_kind: kind,
            ..Default::default()
        };
        let path = dir.join(format!("{kind}.ckpt"));
        Trainer::<f32>::new(cfg, 1).unwrap().checkpoint().save(&path).unwrap();
        path
    }

    #[test]
    fn fresh_macchiato_usage() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "The quick brown fox jumps over the lazy dog.").unwrap();
        let args = DiagnoseArgs {
            checkpoint: checkpoint(dir.path(), MixerKind::MacchiatoRglru),
            input,
            out: dir.path().join("usage.csv"),
        };
        let mut printed = Vec::new();
        let d = cmd_diagnose(&args, &mut printed).unwrap();
        let t = 44;
        assert_eq!(d.rows, 2 * 2 * t * (4 + 1));
        assert!(d.max_row_deviation <= 1e-6);
        assert!(d.heads.iter().all(|h| !h.collapsed && h.entropy > 0.9 * h.max_entropy));
        let csv = std::fs::read_to_string(&args.out).unwrap();
        assert_eq!(csv.lines().count(), d.rows + 2);
        assert!(String::from_utf8(printed).unwrap().contains("0 collapse candidates"));
    }

    #[test]
    fn token_files_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let ids = dir.path().join("ids.txt");
        std::fs::write(&ids, "1 2 3\n4").unwrap();
        assert_eq!(read_tokens(&ids).unwrap(), [1, 2, 3, 4]);
        let args = DiagnoseArgs {
            checkpoint: checkpoint(dir.path(), MixerKind::Attention),
            input: ids.clone(),
            out: dir.path().join("x.csv"),
        };
        assert_eq!(cmd_diagnose(&args, &mut Vec::new()).unwrap_err().exit_code(), 2);
        let args = DiagnoseArgs {
            checkpoint: checkpoint(dir.path(), MixerKind::Latte),
            ..args
        };
        let d = cmd_diagnose(&args, &mut Vec::new()).unwrap();
        assert_eq!(d.rows, 2 * 2 * 4 * 4);
    }

    #[test]
    fn collapse_is_flagged() {
        let u = Tensor::<f64>::from_fn(&[1, 3, 1, 4], |i| if i % 4 == 2 { 1.0 } else { 0.0 });
        let d = summarize(&[u], &mut String::new());
        assert!(d.heads[0].collapsed);
        assert_eq!(d.heads[0].entropy, 0.0);
    }
}
