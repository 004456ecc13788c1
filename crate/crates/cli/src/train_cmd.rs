use std::io::Write;
use std::path::{Path, PathBuf};

use latte::{DType, Scalar};
use latte_model::{ModelConfig, ParameterStore, TrainMetrics, TrainOptions, Trainer};
use latte_tasks::{
    evaluate_mqar, evaluate_perplexity, extrapolation_csv, generate_mqar, length_extrapolation_eval,
    load_text_corpus, mqar_batch, mqar_example, synthetic_corpus, text_batch, ExtrapolationRow, MqarExample, Split,
    TextCorpus, BYTE_VOCAB,
};

use crate::error::{CliError, CliResult};
use crate::run_config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Mqar,
    Text,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mqar" => Ok(Task::Mqar),
            "text" => Ok(Task::Text),
            _ => Err(format!("unknown task `{s}` (expected mqar or text)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// `accuracy` for MQAR, `ppl` for text.
    pub metric_name: &'static str,
    pub final_metric: f64,
    pub metrics: TrainMetrics,
    pub extrapolation: Vec<ExtrapolationRow>,
    pub digest: String,
}

/// Copy of `cfg` with the model vocabulary and length set by the task.
pub fn task_config(cfg: &RunConfig, task: Task) -> CliResult<RunConfig> {
    let mut cfg = cfg.clone();
    match task {
        Task::Mqar => {
            cfg.model.vocab_size = cfg.mqar.model_vocab();
            cfg.model.seq_len = cfg.mqar.seq_len;
        }
        Task::Text => cfg.model.vocab_size = BYTE_VOCAB,
    }
    cfg.validate()?;
    Ok(cfg)
}

fn text_tokens(cfg: &RunConfig) -> CliResult<(Vec<usize>, Vec<usize>)> {
    let seq = cfg.model.seq_len;
    let corpus = match &cfg.text.path {
        Some(p) => load_text_corpus(p, seq)?,
        None => TextCorpus::from_bytes(
            synthetic_corpus(cfg.text.synthetic_seed, cfg.text.synthetic_bytes).as_bytes(),
            seq,
        )?,
    };
    Ok(corpus.split(cfg.text.held_out))
}

fn run_typed<T: Scalar>(cfg: &RunConfig, task: Task, out_dir: Option<&Path>, wallclock: bool) -> CliResult<TrainOutcome> {
    let model = &cfg.model;
    let mut trainer = Trainer::<T>::new(model.clone(), cfg.train.steps)?;
    let opts = TrainOptions {
        steps: cfg.train.steps,
        eval_every: cfg.train.eval_every,
        stop_at_metric: if task == Task::Mqar { cfg.train.stop_at_metric } else { None },
        record_wallclock: wallclock,
        checkpoint_path: out_dir.map(|d| d.join("model.ckpt")),
    };
    let digest = cfg.digest();
    let (metric_name, metrics, extrapolation) = match task {
        Task::Mqar => {
            let train_set = generate_mqar(&cfg.mqar, Split::Train)?;
            let test_set = (0..cfg.train.eval_examples.min(cfg.mqar.test_examples))
                .map(|i| mqar_example(&cfg.mqar, Split::Test, i))
                .collect::<latte::Result<Vec<MqarExample>>>()?;
            let mut eval = |s: &ParameterStore<T>, c: &ModelConfig| evaluate_mqar(s, c, &test_set, 250);
            let metrics = trainer.run(
                |step| mqar_batch(&cfg.mqar, &train_set, step, model.batch_size),
                Some(&mut eval),
                &opts,
            )?;
            ("accuracy", metrics, Vec::new())
        }
        Task::Text => {
            let (train_tokens, held_out) = text_tokens(cfg)?;
            let seq = model.seq_len;
            let windows = cfg.train.eval_examples;
            let mut eval =
                |s: &ParameterStore<T>, c: &ModelConfig| evaluate_perplexity(s, c, &held_out, seq, 8, windows);
            let metrics = trainer.run(
                |step| text_batch(&train_tokens, seq, model.batch_size, model.seed, step),
                Some(&mut eval),
                &opts,
            )?;
            let extrapolation = if cfg.text.eval_lens.is_empty() {
                Vec::new()
            } else {
                let budget = windows * seq;
                length_extrapolation_eval(&trainer.store, model, &held_out, seq, &cfg.text.eval_lens, budget)?
            };
            ("ppl", metrics, extrapolation)
        }
    };
    let final_metric = metrics
        .final_metric()
        .ok_or_else(|| CliError::Usage("no evaluation ran; set train.eval_every".into()))?;
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("metrics.csv"), metrics.to_csv(&digest))?;
        if !extrapolation.is_empty() {
            std::fs::write(dir.join("extrapolation.csv"), extrapolation_csv(&extrapolation, &digest))?;
        }
    }
    Ok(TrainOutcome {
        metric_name,
        final_metric,
        metrics,
        extrapolation,
        digest,
    })
}

/// Train on `task`; with `out_dir`, writes `metrics.csv`, `model.ckpt`
/// and (text with `eval_lens`) `extrapolation.csv`.
pub fn run_training(cfg: &RunConfig, task: Task, out_dir: Option<&Path>, wallclock: bool) -> CliResult<TrainOutcome> {
    let cfg = task_config(cfg, task)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    match cfg.precision()? {
        DType::F32 => run_typed::<f32>(&cfg, task, out_dir, wallclock),
        DType::F64 => run_typed::<f64>(&cfg, task, out_dir, wallclock),
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub task: Task,
    pub mixer: Option<latte_model::MixerKind>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub wallclock: bool,
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<TrainOutcome> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = args.mixer {
        cfg.model.mixer_kind = m;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.model.seed = s;
    }
    let outcome = run_training(&cfg, args.task, Some(&args.out), args.wallclock)?;
    writeln!(out, "config_digest {}", outcome.digest)?;
    for r in &outcome.extrapolation {
        writeln!(out, "ppl@{} {:.4}", r.len, r.ppl)?;
    }
    writeln!(out, "final {} {:.4}", outcome.metric_name, outcome.final_metric)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use latte_model::MixerKind;

    fn small() -> RunConfig {
        RunConfig::parse(
            "model.n_layers = 1\nmodel.d_model = 16\nmodel.n_heads = 2\nmodel.d_ff = 32\nmodel.n_latents = 8\n\
             model.window = 8\nmodel.batch_size = 4\nmodel.warmup_steps = 2\nmodel.learning_rate = 0.003\n\
             model.mixer_kind = macchiato_rglru\nmodel.dropout = 0.0\nmqar.train_examples = 200\n\
             mqar.test_examples = 50\ntrain.steps = 6\ntrain.eval_every = 3\ntrain.eval_examples = 20\n\
             model.seq_len = 32\ntext.synthetic_bytes = 4000",
        )
        .unwrap()
    }

    #[test]
    fn mqar_run_writes_reproducible_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let args = TrainArgs {
            config: None,
            task: Task::Mqar,
            mixer: None,
            steps: None,
            seed: None,
            out: dir.path().join("a"),
            wallclock: false,
        };
        let cfg_path = dir.path().join("run.cfg");
        std::fs::write(&cfg_path, serde_json::to_string(&small()).unwrap()).unwrap();
        let args = TrainArgs {
            config: Some(cfg_path),
            ..args
        };
        let mut printed = Vec::new();
        let a = cmd_train(&args, &mut printed).unwrap();
        assert!(String::from_utf8(printed).unwrap().contains("final accuracy"));
        assert!((0.0..=1.0).contains(&a.final_metric));
        let csv = std::fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
        assert!(csv.starts_with("# config_digest="));
        assert!(csv.lines().nth(1).unwrap().contains("task_metric"));
        assert_eq!(csv.lines().count(), 2 + 6);
        assert!(dir.path().join("a/model.ckpt").exists());

        let again = TrainArgs {
            out: dir.path().join("b"),
            ..args.clone()
        };
        cmd_train(&again, &mut Vec::new()).unwrap();
        assert_eq!(csv, std::fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap());
        assert_eq!(
            std::fs::read(dir.path().join("a/model.ckpt")).unwrap(),
            std::fs::read(dir.path().join("b/model.ckpt")).unwrap()
        );
    }

    #[test]
    fn text_run_reports_perplexity_and_extrapolation() {
        let mut cfg = small();
        cfg.text.eval_lens = vec![32, 64];
        cfg.model.mixer_kind = MixerKind::Latte;
        let dir = tempfile::tempdir().unwrap();
        let o = run_training(&cfg, Task::Text, Some(dir.path()), false).unwrap();
        assert_eq!(o.metric_name, "ppl");
        assert!(o.final_metric > 1.0 && o.final_metric < 300.0);
        assert_eq!(o.extrapolation.len(), 2);
        assert!(dir.path().join("extrapolation.csv").exists());
    }

    #[test]
    fn task_sets_vocabulary() {
        let c = task_config(&small(), Task::Mqar).unwrap();
        assert_eq!((c.model.vocab_size, c.model.seq_len), (65, 64));
        assert_eq!(task_config(&small(), Task::Text).unwrap().model.vocab_size, 256);
        assert!("vision".parse::<Task>().is_err());
    }
}
