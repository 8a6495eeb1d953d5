//! Multi-task co-training loop, exact-match evaluation and best-checkpoint
//! selection by dev macro-average.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tasks::{Example, TaskMixture, TaskSpec};
use crate::transformer::{Seq2Seq, TransformerModel};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Examples per gradient chunk; chunks run in parallel.
    pub grad_chunk: usize,
    /// Repeat the first sampled batch on every step.
    pub overfit: bool,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            eval_every: 500,
            grad_chunk: 8,
            overfit: false,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("train.steps", self.steps),
            ("train.batch_size", self.batch_size),
            ("train.eval_every", self.eval_every),
            ("train.grad_chunk", self.grad_chunk),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub accuracy: f64,
}

/// One evaluation record; serialized as one line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub step: usize,
    pub tasks: Vec<TaskScore>,
    pub macro_avg: f64,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub params_added: usize,
    pub params_total: usize,
    /// Seconds since training started; kept out of the metrics file so that
    /// it stays reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock: f64,
}

impl RunMetrics {
    pub fn score(&self, task: &str) -> Option<f64> {
        self.tasks.iter().find(|s| s.task == task).map(|s| s.accuracy)
    }
}

/// Unweighted mean of per-task scores.
pub fn macro_average(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Keeps the first evaluation with the highest macro-average.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BestTracker {
    best: Option<(usize, f64)>,
}

impl BestTracker {
    /// Returns true when `macro_avg` is a new strict maximum.
    pub fn observe(&mut self, step: usize, macro_avg: f64) -> bool {
        match self.best {
            Some((_, b)) if macro_avg <= b => false,
            _ => {
                self.best = Some((step, macro_avg));
                true
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Exact-match accuracy of greedy decoding on the task's dev set.
pub fn evaluate<M: Seq2Seq + Sync>(model: &M, task: &TaskSpec) -> Result<f64> {
    evaluate_examples(model, &task.dev_set(), task.shape.max_len + 1)
}

/// Exact-match accuracy over `examples`, decoding at most `max_steps` tokens.
pub fn evaluate_examples<M: Seq2Seq + Sync>(model: &M, examples: &[Example], max_steps: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let hits: Vec<Result<bool>> = examples
        .par_iter()
        .map(|ex| Ok(model.greedy_decode(&ex.input, max_steps)? == ex.target))
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<RunMetrics>,
    pub best_step: usize,
    pub best_macro_avg: f64,
    pub final_loss: f64,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn best_metrics(&self) -> &RunMetrics {
        self.history
            .iter()
            .find(|m| m.step == self.best_step)
            .expect("best step is recorded")
    }
}

/// Markdown report of a run: every evaluation, then the per-task scores of
/// the selected checkpoint.
pub fn report(title: &str, outcome: &TrainOutcome) -> String {
    use std::fmt::Write as _;
    let mut s = format!("# {title}\n\n");
    let names: Vec<&str> = outcome
        .history
        .first()
        .map(|m| m.tasks.iter().map(|t| t.task.as_str()).collect())
        .unwrap_or_default();
    let _ = writeln!(s, "| step | loss | {} | macro |", names.join(" | "));
    let _ = writeln!(s, "|---|---|{}---|", "---|".repeat(names.len()));
    for m in &outcome.history {
        let scores: Vec<String> = m.tasks.iter().map(|t| format!("{:.3}", t.accuracy)).collect();
        let _ = writeln!(s, "| {} | {:.4} | {} | {:.4} |", m.step, m.train_loss, scores.join(" | "), m.macro_avg);
    }
    let best = outcome.best_metrics();
    let _ = writeln!(
        s,
        "\nSelected checkpoint: step {} (dev macro-average {:.4}, chosen by macro-average over all tasks).\n",
        best.step, best.macro_avg
    );
    let _ = writeln!(s, "| task | accuracy |\n|---|---|");
    for t in &best.tasks {
        let _ = writeln!(s, "| {} | {:.4} |", t.task, t.accuracy);
    }
    let _ = writeln!(
        s,
        "\nParameters: {} total, {} added by gating.",
        best.params_total, best.params_added
    );
    s
}

struct Sinks {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    dir: PathBuf,
}

impl Sinks {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok(BufWriter::new(file))
        };
        Ok(Self {
            metrics: open(METRICS_FILE)?,
            timing: open(TIMING_FILE)?,
            dir: dir.to_path_buf(),
        })
    }

    fn record(&mut self, m: &RunMetrics) -> Result<()> {
        let line = serde_json::to_string(m)?;
        let timing = serde_json::json!({ "step": m.step, "wall_clock": m.wall_clock });
        let write = |w: &mut BufWriter<File>, s: &str, name: &str| -> Result<()> {
            writeln!(w, "{s}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(self.dir.join(name), e))
        };
        write(&mut self.metrics, &line, METRICS_FILE)?;
        write(&mut self.timing, &timing.to_string(), TIMING_FILE)
    }
}

fn check_finite(model: &TransformerModel, step: usize, loss: f64, grads: &[Vec<f64>]) -> Result<()> {
    let params = model.params();
    for (id, name, _) in params.iter() {
        if grads[id.index()].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                block: name.to_string(),
            });
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            block: "loss".into(),
        });
    }
    Ok(())
}

/// Trains `model` on `mixture`, evaluating every task's dev set every
/// `eval_every` steps and after the last step. When `out_dir` is given the
/// metrics file, a wall-clock log and the best checkpoint are written there.
pub fn train(
    model: &mut TransformerModel,
    mixture: &TaskMixture,
    config: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with(model, mixture, config, seed, out_dir, true)
}

/// [`train`] with control over whether the best checkpoint is written.
pub fn train_with(
    model: &mut TransformerModel,
    mixture: &TaskMixture,
    config: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
    save_checkpoint: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut sinks = out_dir.map(Sinks::open).transpose()?;
    let dev: Vec<Vec<Example>> = mixture.tasks().iter().map(TaskSpec::dev_set).collect();
    if let Some(i) = dev.iter().position(Vec::is_empty) {
        return Err(Error::config("tasks.dev_size", format!("task `{}` has no dev examples", mixture.tasks()[i].name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimizer = Adam::new(config.optimizer, model.params());
    let params_added = model.added_param_count();
    let params_total = model.param_count();
    let fixed_batch = if config.overfit {
        Some(mixture.sample_batch(config.batch_size, &mut rng)?)
    } else {
        None
    };

    let started = Instant::now();
    let mut history = Vec::new();
    let mut best = BestTracker::default();
    let mut loss_since_eval = 0.0;
    let mut steps_since_eval = 0usize;
    let mut final_loss = f64::NAN;
    for step in 1..=config.steps {
        let sampled;
        let batch = match &fixed_batch {
            Some(b) => b,
            None => {
                sampled = mixture.sample_batch(config.batch_size, &mut rng)?;
                &sampled
            }
        };
        let g = model.batch_gradients_chunked(batch, config.grad_chunk)?;
        check_finite(model, step, g.loss, &g.grads)?;
        optimizer.step(model.params_mut(), &g.grads)?;
        final_loss = g.loss;
        loss_since_eval += g.loss;
        steps_since_eval += 1;

        if step % config.eval_every == 0 || step == config.steps {
            let max_steps: Vec<usize> = mixture.tasks().iter().map(|t| t.shape.max_len + 1).collect();
            let accs: Vec<Result<f64>> = dev
                .par_iter()
                .zip(max_steps)
                .map(|(set, limit)| evaluate_examples(&*model, set, limit))
                .collect();
            let accs = accs.into_iter().collect::<Result<Vec<f64>>>()?;
            let metrics = RunMetrics {
                step,
                tasks: mixture
                    .tasks()
                    .iter()
                    .zip(&accs)
                    .map(|(t, &accuracy)| TaskScore {
                        task: t.name.clone(),
                        accuracy,
                    })
                    .collect(),
                macro_avg: macro_average(&accs),
                train_loss: loss_since_eval / steps_since_eval as f64,
                params_added,
                params_total,
                wall_clock: started.elapsed().as_secs_f64(),
            };
            loss_since_eval = 0.0;
            steps_since_eval = 0;
            log::info!(
                "step {step}: loss {:.4}, macro-average {:.4}",
                metrics.train_loss,
                metrics.macro_avg
            );
            if let Some(s) = &mut sinks {
                s.record(&metrics)?;
            }
            if best.observe(step, metrics.macro_avg) && save_checkpoint {
                if let Some(s) = &sinks {
                    checkpoint::save(model.params(), &s.dir.join(BEST_CHECKPOINT))?;
                }
            }
            history.push(metrics);
        }
    }
    let (best_step, best_macro_avg) = best.best().expect("at least one evaluation");
    Ok(TrainOutcome {
        history,
        best_step,
        best_macro_avg,
        final_loss,
        best_checkpoint: sinks.filter(|_| save_checkpoint).map(|s| s.dir.join(BEST_CHECKPOINT)),
    })
}
