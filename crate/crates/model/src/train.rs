use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use latte::{LatteError, Result, Scalar};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::forward::{loss_and_grads, Pass, TokenBatch};
use crate::optim::{clip_scale, learning_rate, AdamW};
use crate::params::{build_model, ParameterStore};
use crate::tape::Tape;

pub const METRICS_HEADER: &str = "step,loss,lr,task_metric,wallclock_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    /// 1-based count of completed steps.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub task_metric: Option<f64>,
    pub wallclock_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMetrics {
    pub rows: Vec<MetricRow>,
    pub stopped_early: bool,
}

impl TrainMetrics {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.task_metric)
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.task_metric)
            .fold(None, |b, m| Some(b.map_or(m, |b: f64| b.max(m))))
    }

    pub fn to_csv(&self, config_digest: &str) -> String {
        let mut s = format!("# config_digest={config_digest}\n{METRICS_HEADER}\n");
        for r in &self.rows {
            let metric = r.task_metric.map(|m| format!("{m}")).unwrap_or_default();
            writeln!(s, "{},{},{},{},{}", r.step, r.loss, r.lr, metric, r.wallclock_ms).unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub steps: usize,
    /// Evaluate every this many steps and after the last; zero disables.
    pub eval_every: usize,
    /// Stop once the task metric reaches this value.
    pub stop_at_metric: Option<f64>,
    /// Record elapsed milliseconds; zeros keep metrics reproducible.
    pub record_wallclock: bool,
    /// Written after the run, and with the last good state on divergence.
    pub checkpoint_path: Option<PathBuf>,
}

pub type Evaluator<'a, T> = dyn FnMut(&ParameterStore<T>, &ModelConfig) -> Result<f64> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    pub config: ModelConfig,
    pub store: ParameterStore<T>,
    pub optimizer: AdamW<T>,
    pub step: usize,
    pub total_steps: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig, total_steps: usize) -> Result<Self> {
        let store = build_model(&config, config.seed)?;
        let optimizer = AdamW::new(&config, &store);
        Ok(Self {
            config,
            store,
            optimizer,
            step: 0,
            total_steps,
        })
    }

    pub fn from_checkpoint(c: Checkpoint<T>) -> Result<Self> {
        let optimizer = c
            .optimizer
            .ok_or_else(|| LatteError::Format("checkpoint has no optimizer state".into()))?;
        Ok(Self {
            config: c.config,
            store: c.store,
            optimizer,
            step: c.step,
            total_steps: c.total_steps,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            total_steps: self.total_steps,
            store: self.store.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// One optimizer step; returns the pre-update loss and the rate used.
    pub fn train_step(&mut self, batch: &TokenBatch) -> Result<(f64, f64)> {
        let mut tape = Tape::new(true);
        let pass = Pass::Train { step: self.step };
        let (loss, grads) = loss_and_grads(&self.store, &self.config, batch, pass, T::one(), &mut tape)?;
        drop(tape);
        let lr = learning_rate(&self.config, self.step, self.total_steps);
        let scale = clip_scale(grads.global_norm(), self.config.grad_clip);
        self.optimizer.step(&mut self.store, &grads, lr, scale)?;
        self.step += 1;
        Ok((loss.as_f64(), lr))
    }

    /// Run `opts.steps` steps drawing batches by absolute step index.
    pub fn run(
        &mut self,
        mut batches: impl FnMut(usize) -> Result<TokenBatch>,
        mut eval: Option<&mut Evaluator<'_, T>>,
        opts: &TrainOptions,
    ) -> Result<TrainMetrics> {
        let start = Instant::now();
        let mut metrics = TrainMetrics::default();
        for i in 0..opts.steps {
            let batch = batches(self.step)?;
            let (loss, lr) = match self.train_step(&batch) {
                Ok(v) => v,
                Err(e) => {
                    if let Some(path) = &opts.checkpoint_path {
                        self.checkpoint().save(path)?;
                    }
                    return Err(e);
                }
            };
            let last = i + 1 == opts.steps;
            let due = opts.eval_every > 0 && (self.step % opts.eval_every == 0 || last);
            let task_metric = match (&mut eval, due) {
                (Some(f), true) => Some(f(&self.store, &self.config)?),
                _ => None,
            };
            let wallclock_ms = if opts.record_wallclock {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            metrics.rows.push(MetricRow {
                step: self.step,
                loss,
                lr,
                task_metric,
                wallclock_ms,
            });
            if let (Some(m), Some(target)) = (task_metric, opts.stop_at_metric) {
                if m >= target {
                    metrics.stopped_early = !last;
                    break;
                }
            }
        }
        if let Some(path) = &opts.checkpoint_path {
            self.checkpoint().save(path)?;
        }
        Ok(metrics)
    }
}

/// Train a store in place for `steps` steps.
pub fn train<T: Scalar>(
    store: &mut ParameterStore<T>,
    cfg: &ModelConfig,
    batches: impl FnMut(usize) -> Result<TokenBatch>,
    steps: usize,
) -> Result<TrainMetrics> {
    let mut t = Trainer {
        config: cfg.clone(),
        store: store.clone(),
        optimizer: AdamW::new(cfg, store),
        step: 0,
        total_steps: steps,
    };
    let opts = TrainOptions {
        steps,
        ..Default::default()
    };
    let m = t.run(batches, None, &opts)?;
    *store = t.store;
    Ok(m)
}
