//! Synthetic text-to-text tasks and the proportionate task mixture.
//!
//! Every example is a pair of token sequences. The input starts with the
//! task's prefix token; the target does not include the end-of-sequence
//! token, which the model is trained to emit after it.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token layout shared by every built-in task.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const EVEN: usize = 3;
    pub const ODD: usize = 4;
    /// First task prefix token; task `i` uses `PREFIX_BASE + i`.
    pub const PREFIX_BASE: usize = 5;
    pub const MAX_TASKS: usize = 11;
    /// Token of symbol value 0.
    pub const DIGIT_BASE: usize = PREFIX_BASE + MAX_TASKS;

    pub const fn prefix(task: usize) -> usize {
        PREFIX_BASE + task
    }

    pub const fn digit(value: usize) -> usize {
        DIGIT_BASE + value
    }

    /// Smallest vocabulary that holds `symbols` digit values.
    pub const fn min_vocab(symbols: usize) -> usize {
        DIGIT_BASE + symbols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Copy,
    Reverse,
    SortAscending,
    Parity,
    ModularSum,
}

impl TaskKind {
    pub const BUILTIN: [TaskKind; 5] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::SortAscending,
        TaskKind::Parity,
        TaskKind::ModularSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::SortAscending => "sort",
            TaskKind::Parity => "parity",
            TaskKind::ModularSum => "modsum",
        }
    }

    /// Target symbol sequence for the given digit values.
    pub fn target(self, values: &[usize], symbols: usize) -> Vec<usize> {
        match self {
            TaskKind::Copy => values.iter().map(|&v| vocab::digit(v)).collect(),
            TaskKind::Reverse => values.iter().rev().map(|&v| vocab::digit(v)).collect(),
            TaskKind::SortAscending => {
                let mut sorted = values.to_vec();
                sorted.sort_unstable();
                sorted.into_iter().map(vocab::digit).collect()
            }
            TaskKind::Parity => {
                let sum: usize = values.iter().sum();
                vec![if sum % 2 == 1 { vocab::ODD } else { vocab::EVEN }]
            }
            TaskKind::ModularSum => vec![vocab::digit(values.iter().sum::<usize>() % symbols)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub task: usize,
    /// Prefix token followed by the content tokens.
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// Content-length and alphabet settings shared by the built-in tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskShape {
    pub min_len: usize,
    pub max_len: usize,
    /// Number of distinct digit symbols.
    pub symbols: usize,
}

impl Default for TaskShape {
    fn default() -> Self {
        Self {
            min_len: 2,
            max_len: 6,
            symbols: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub index: usize,
    pub kind: TaskKind,
    pub prefix: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub shape: TaskShape,
    pub seed: u64,
}

const TRAIN_STREAM: u64 = 0;
const DEV_STREAM: u64 = 1;

impl TaskSpec {
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Example {
        let len = rng.random_range(self.shape.min_len..=self.shape.max_len);
        let values: Vec<usize> = (0..len).map(|_| rng.random_range(0..self.shape.symbols)).collect();
        self.example_from_values(&values)
    }

    pub fn example_from_values(&self, values: &[usize]) -> Example {
        let mut input = Vec::with_capacity(values.len() + 1);
        input.push(self.prefix);
        input.extend(values.iter().map(|&v| vocab::digit(v)));
        Example {
            task: self.index,
            input,
            target: self.kind.target(values, self.shape.symbols),
        }
    }

    fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(self.index as u64));
        rng.set_stream(stream);
        rng
    }

    pub fn train_set(&self) -> Vec<Example> {
        let mut rng = self.stream(TRAIN_STREAM);
        (0..self.train_size).map(|_| self.generate(&mut rng)).collect()
    }

    /// Dev examples drawn from a separate stream, skipping any input that
    /// also occurs in the train set (as long as fresh inputs can be found).
    pub fn dev_set(&self) -> Vec<Example> {
        let train: HashSet<Vec<usize>> = self.train_set().into_iter().map(|e| e.input).collect();
        let mut rng = self.stream(DEV_STREAM);
        let mut dev = Vec::with_capacity(self.dev_size);
        let mut attempts = 0;
        while dev.len() < self.dev_size {
            let ex = self.generate(&mut rng);
            attempts += 1;
            if !train.contains(&ex.input) || attempts > 100 * self.dev_size {
                dev.push(ex);
            }
        }
        dev
    }
}

/// The five built-in tasks with deliberately skewed train sizes.
pub fn builtin_tasks(seed: u64) -> Vec<TaskSpec> {
    tasks_with_sizes(seed, &[8000, 4000, 2000, 1000, 500], 100, TaskShape::default())
        .expect("builtin sizes are valid")
}

/// Built-in task kinds in order, one per entry of `train_sizes`.
pub fn tasks_with_sizes(seed: u64, train_sizes: &[usize], dev_size: usize, shape: TaskShape) -> Result<Vec<TaskSpec>> {
    if train_sizes.len() > TaskKind::BUILTIN.len() {
        return Err(Error::config(
            "tasks.train_sizes",
            format!("at most {} tasks are available", TaskKind::BUILTIN.len()),
        ));
    }
    if shape.min_len == 0 || shape.min_len > shape.max_len || shape.symbols < 2 {
        return Err(Error::config(
            "tasks",
            format!("need 1 <= min_len <= max_len and symbols >= 2, got {shape:?}"),
        ));
    }
    Ok(train_sizes
        .iter()
        .zip(TaskKind::BUILTIN)
        .enumerate()
        .map(|(index, (&train_size, kind))| TaskSpec {
            name: kind.name().to_string(),
            index,
            kind,
            prefix: vocab::prefix(index),
            train_size,
            dev_size,
            shape,
            seed,
        })
        .collect())
}

/// Tasks sampled in proportion to their train-set sizes.
#[derive(Debug, Clone)]
pub struct TaskMixture {
    tasks: Vec<TaskSpec>,
    weights: Vec<f64>,
    train: Vec<Vec<Example>>,
    sampler: WeightedIndex<usize>,
}

impl TaskMixture {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Invalid("task mixture is empty".into()));
        }
        let mut prefixes = HashSet::new();
        for t in &tasks {
            if !prefixes.insert(t.prefix) {
                return Err(Error::Invalid(format!("duplicate prefix token {} ({})", t.prefix, t.name)));
            }
        }
        let sizes: Vec<usize> = tasks.iter().map(|t| t.train_size).collect();
        let total: usize = sizes.iter().sum();
        let sampler = WeightedIndex::new(&sizes)
            .map_err(|e| Error::Invalid(format!("task mixture needs a nonzero train size: {e}")))?;
        let weights = sizes.iter().map(|&s| s as f64 / total as f64).collect();
        let train = tasks.iter().map(TaskSpec::train_set).collect();
        Ok(Self {
            tasks,
            weights,
            train,
            sampler,
        })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn train_set(&self, task: usize) -> &[Example] {
        &self.train[task]
    }

    pub fn sample_task<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler.sample(rng)
    }

    /// Draws examples i.i.d.: a task by mixture weight, then a uniform
    /// example from its train set.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<Example>> {
        if batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        Ok((0..batch_size)
            .map(|_| {
                let task = self.sample_task(rng);
                let pool = &self.train[task];
                pool[rng.random_range(0..pool.len())].clone()
            })
            .collect())
    }
}
