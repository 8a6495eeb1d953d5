//! The TOML run configuration shared by every subcommand.
//!
//! A file only needs the keys it changes; everything else takes the
//! defaults below. Overrides are `dotted.key=value` strings applied after the
//! file, typed by the key's default value. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::gradcheck;
use crate::harness::TrainConfig;
use crate::hypergrid::Variant;
use crate::optim::AdamConfig;
use crate::outgate::OutGateMode;
use crate::tasks::{tasks_with_sizes, TaskMixture, TaskShape, TaskSpec};
use crate::transformer::{GateConfig, GateKind, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateType {
    None,
    HyperGrid,
    OutGate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            vocab_size: m.vocab_size,
            d_model: m.d_model,
            d_ff: m.d_ff,
            heads: m.heads,
            layers_enc: m.layers_enc,
            layers_dec: m.layers_dec,
            max_len: m.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSection {
    pub kind: GateType,
    pub variant: Variant,
    /// Grid rows, partitioning the gated matrix's fan-in (`d_ff`).
    pub d_r: usize,
    /// Grid columns, partitioning its fan-out (`d_model`).
    pub d_c: usize,
    /// Gate width: variant `L` or OutGate blocks. 0 means one gate per unit.
    pub n: usize,
    pub encoder: bool,
    pub decoder: bool,
}

impl Default for GateSection {
    fn default() -> Self {
        Self {
            kind: GateType::HyperGrid,
            variant: Variant::LG,
            d_r: 4,
            d_c: 8,
            n: 0,
            encoder: true,
            decoder: true,
        }
    }
}

impl GateSection {
    pub fn gate_kind(&self) -> GateKind {
        let n = (self.n > 0).then_some(self.n);
        match self.kind {
            GateType::None => GateKind::None,
            GateType::HyperGrid => GateKind::HyperGrid {
                variant: self.variant,
                d_r: self.d_r,
                d_c: self.d_c,
                n: if self.variant == Variant::L { n } else { None },
            },
            GateType::OutGate => GateKind::OutGate(match n {
                None => OutGateMode::Full,
                Some(n) => OutGateMode::Blocked(n),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasksSection {
    /// One entry per built-in task, in order copy, reverse, sort, parity, modsum.
    pub train_sizes: Vec<usize>,
    pub dev_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub symbols: usize,
}

impl Default for TasksSection {
    fn default() -> Self {
        let shape = TaskShape::default();
        Self {
            train_sizes: vec![8000, 4000, 2000, 1000, 500],
            dev_size: 100,
            min_len: shape.min_len,
            max_len: shape.max_len,
            symbols: shape.symbols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub grad_chunk: usize,
    pub overfit: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            grad_chunk: t.grad_chunk,
            overfit: t.overfit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    /// Coordinates probed per parameter block.
    pub budget: usize,
    pub batch_size: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            budget: gradcheck::DEFAULT_BUDGET,
            batch_size: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub variants: Vec<Variant>,
    pub d_r: Vec<usize>,
    pub d_c: Vec<usize>,
    pub seeds: usize,
    /// Training steps per cell.
    pub steps: usize,
    pub eval_every: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            variants: vec![Variant::L2, Variant::LG, Variant::GL],
            d_r: vec![1, 2, 4, 8],
            d_c: vec![2, 4, 8, 16],
            seeds: 1,
            steps: 300,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub gate: GateSection,
    pub tasks: TasksSection,
    pub train: TrainSection,
    pub optimizer: AdamConfig,
    pub gradcheck: GradcheckSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            model: ModelSection::default(),
            gate: GateSection::default(),
            tasks: TasksSection::default(),
            train: TrainSection::default(),
            optimizer: AdamConfig::default(),
            gradcheck: GradcheckSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn defaults_table() -> Table {
    match Value::try_from(RunConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

/// Every config key with its default value, in schema order.
pub fn config_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, table: &Table, out: &mut Vec<(String, String)>) {
        for (k, v) in table {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(t) => walk(&key, t, out),
                other => out.push((key, other.to_string())),
            }
        }
    }
    let mut out = Vec::new();
    walk("", &defaults_table(), &mut out);
    out
}

fn parse_typed(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let bad = |what: &str| Error::config(key, format!("expected {what}, got `{raw}`"));
    let raw = raw.trim();
    Ok(match like {
        Value::Integer(_) => Value::Integer(raw.parse().map_err(|_| bad("an integer"))?),
        Value::Float(_) => Value::Float(raw.parse().map_err(|_| bad("a number"))?),
        Value::Boolean(_) => Value::Boolean(raw.parse().map_err(|_| bad("true or false"))?),
        Value::String(_) => Value::String(raw.trim_matches('"').to_string()),
        _ => {
            let doc: Table = format!("v = {raw}").parse().map_err(|_| bad("a TOML value"))?;
            doc["v"].clone()
        }
    })
}

/// Applies `key=value` overrides to a parsed table. Keys must exist in the
/// schema; the value is parsed according to the key's default type.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    let defaults = defaults_table();
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::config(item.as_str(), "override must look like key=value"))?;
        let key = key.trim();
        let path: Vec<&str> = key.split('.').collect();
        let mut schema = &defaults;
        let mut target = &mut *table;
        for (i, part) in path.iter().enumerate() {
            let unknown = || Error::config(key, "unknown config key");
            let like = schema.get(*part).ok_or_else(unknown)?;
            if i + 1 == path.len() {
                if like.is_table() {
                    return Err(Error::config(key, "is a section, not a value"));
                }
                let value = parse_typed(key, raw, like)?;
                target.insert(part.to_string(), value);
            } else {
                schema = like.as_table().ok_or_else(unknown)?;
                target = target
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Table(Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::config(key, "is not a section in the config file"))?;
            }
        }
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads `path` (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: m.vocab_size,
            d_model: m.d_model,
            d_ff: m.d_ff,
            heads: m.heads,
            layers_enc: m.layers_enc,
            layers_dec: m.layers_dec,
            max_len: m.max_len,
            gate: GateConfig {
                kind: self.gate.gate_kind(),
                encoder: self.gate.encoder,
                decoder: self.gate.decoder,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            grad_chunk: t.grad_chunk,
            overfit: t.overfit,
            optimizer: self.optimizer,
        }
    }

    pub fn task_shape(&self) -> TaskShape {
        TaskShape {
            min_len: self.tasks.min_len,
            max_len: self.tasks.max_len,
            symbols: self.tasks.symbols,
        }
    }

    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        tasks_with_sizes(self.seed, &self.tasks.train_sizes, self.tasks.dev_size, self.task_shape())
    }

    pub fn mixture(&self) -> Result<TaskMixture> {
        TaskMixture::new(self.task_specs()?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.task_specs()?;
        if self.tasks.train_sizes.is_empty() || self.tasks.train_sizes.iter().all(|&s| s == 0) {
            return Err(Error::config("tasks.train_sizes", "need at least one nonempty task"));
        }
        if self.tasks.dev_size == 0 {
            return Err(Error::config("tasks.dev_size", "must be at least 1"));
        }
        if self.tasks.symbols + crate::tasks::vocab::DIGIT_BASE > self.model.vocab_size {
            return Err(Error::config(
                "tasks.symbols",
                format!("needs vocab_size >= {}", self.tasks.symbols + crate::tasks::vocab::DIGIT_BASE),
            ));
        }
        // Input carries a prefix token; decoder input carries the start token.
        if self.tasks.max_len + 1 > self.model.max_len {
            return Err(Error::config(
                "tasks.max_len",
                format!("sequences of {} tokens exceed model.max_len = {}", self.tasks.max_len + 1, self.model.max_len),
            ));
        }
        if self.gradcheck.budget == 0 {
            return Err(Error::config("gradcheck.budget", "must be at least 1"));
        }
        if self.gradcheck.batch_size == 0 {
            return Err(Error::config("gradcheck.batch_size", "must be at least 1"));
        }
        let s = &self.sweep;
        if s.seeds == 0 || s.steps == 0 || s.eval_every == 0 {
            return Err(Error::config("sweep", "seeds, steps and eval_every must be at least 1"));
        }
        Ok(())
    }
}
