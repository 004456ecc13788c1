use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use latte::DType;
use latte_model::MixerKind;

use crate::bench::{cmd_bench, BenchArgs, BenchMixer};
use crate::diagnose::{cmd_diagnose, DiagnoseArgs};
use crate::error::{CliError, CliResult};
use crate::train_cmd::{cmd_train, Task, TrainArgs};
use crate::verify::{cmd_verify, parse_overrides, VerifyArgs};

#[derive(Debug, Parser)]
#[command(name = "latte", version, about = "Latent attention: verification, training, benchmarks and diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the invariant suite and print a pass/fail table.
    Verify(VerifyCmd),
    /// Train a small causal model on MQAR or byte-level text.
    Train(TrainCmd),
    /// Time the mixing cores across sequence lengths.
    Bench(BenchCmd),
    /// Dump latent-state usage of a checkpoint over one sequence.
    Diagnose(DiagnoseCmd),
}

#[derive(Debug, Args)]
pub struct VerifyCmd {
    #[arg(long, default_value = "f32")]
    pub precision: DType,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated `check=tolerance` pairs.
    #[arg(long)]
    pub tol_overrides: Option<String>,
    /// Replace the stabilized scan with the unshifted recursion.
    #[arg(long)]
    pub break_stabilization: bool,
    #[arg(long)]
    pub skip_gradients: bool,
    /// CSV report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// JSON or `section.key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Task,
    #[arg(long)]
    pub mixer: Option<MixerKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Record elapsed time in the metrics file.
    #[arg(long)]
    pub wallclock: bool,
}

#[derive(Debug, Args)]
pub struct BenchCmd {
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096,8192")]
    pub seq_lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "latte,attention")]
    pub mixers: Vec<BenchMixer>,
    #[arg(long, default_value_t = 256)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub latents: usize,
    #[arg(long, default_value_t = 128)]
    pub window: usize,
    /// Tokens per timed call; defaults to the longest length.
    #[arg(long)]
    pub token_budget: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 4096)]
    pub max_memory_mb: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Worker cap from `LATTE_THREADS`; every kernel here runs on one thread,
/// so any positive cap is honored.
pub fn thread_cap(var: Option<&str>) -> CliResult<Option<usize>> {
    match var {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("LATTE_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    thread_cap(std::env::var("LATTE_THREADS").ok().as_deref())?;
    match cli.command {
        Command::Verify(c) => {
            let args = VerifyArgs {
                precision: c.precision,
                seed: c.seed,
                tolerance_overrides: parse_overrides(c.tol_overrides.as_deref().unwrap_or(""))?,
                break_stabilization: c.break_stabilization,
                skip_gradients: c.skip_gradients,
                report: c.report,
            };
            cmd_verify(&args, out).map(drop)
        }
        Command::Train(c) => {
            let args = TrainArgs {
                config: c.config,
                task: c.task,
                mixer: c.mixer,
                steps: c.steps,
                seed: c.seed,
                out: c.out,
                wallclock: c.wallclock,
            };
            cmd_train(&args, out).map(drop)
        }
        Command::Bench(c) => {
            let args = BenchArgs {
                seq_lens: c.seq_lens,
                mixers: c.mixers,
                d_model: c.d_model,
                heads: c.heads,
                latents: c.latents,
                window: c.window,
                token_budget: c.token_budget,
                repeat: c.repeat,
                warmup: c.warmup,
                max_memory_mb: c.max_memory_mb,
                seed: c.seed,
            };
            cmd_bench(&args, c.out.as_deref(), out).map(drop)
        }
        Command::Diagnose(c) => {
            let args = DiagnoseArgs {
                checkpoint: c.checkpoint,
                input: c.input,
                out: c.out,
            };
            cmd_diagnose(&args, out).map(drop)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_mixer_is_a_parse_error() {
        let err = Cli::try_parse_from(["latte", "train", "--task", "mqar", "--mixer", "mamba", "--out", "x"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(Cli::try_parse_from(["latte", "train", "--task", "mqar", "--mixer", "latte", "--out", "x"]).is_ok());
    }

    #[test]
    fn list_flags_split_on_commas() {
        let cli = Cli::try_parse_from(["latte", "bench", "--seq-lens", "64,128", "--mixers", "swa,linear"]).unwrap();
        match cli.command {
            Command::Bench(b) => {
                assert_eq!(b.seq_lens, [64, 128]);
                assert_eq!(b.mixers, [BenchMixer::Swa, BenchMixer::Linear]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn thread_cap_validation() {
        assert_eq!(thread_cap(None).unwrap(), None);
        assert_eq!(thread_cap(Some("4")).unwrap(), Some(4));
        assert!(thread_cap(Some("0")).is_err());
        assert!(thread_cap(Some("many")).is_err());
    }
}
