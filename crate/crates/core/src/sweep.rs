//! Grid-size sweep: train one model per (variant, d_r, d_c, seed) cell and
//! aggregate the best dev macro-average along each grid axis.
//!
//! State lives under one directory:
//!
//! ```text
//! <dir>/cells/<variant>-r<d_r>-c<d_c>-s<k>/metrics.jsonl
//! <dir>/cells/<variant>-r<d_r>-c<d_c>-s<k>/done.json   (written last)
//! <dir>/cells.csv
//! <dir>/<variant>_fan_in.csv, <dir>/<variant>_fan_out.csv
//! <dir>/report.md
//! ```
//!
//! A cell with a `done.json` marker is never rerun, so an interrupted sweep
//! resumes where it stopped. Plot files have the columns
//! `value,max,mean,min`: for every value on one axis, statistics of the cell
//! scores over the other axis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GateType, RunConfig};
use crate::error::{Error, Result};
use crate::harness;
use crate::hypergrid::Variant;
use crate::tasks::TaskMixture;
use crate::transformer::TransformerModel;

pub const MARKER: &str = "done.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    /// Aggregates indexed by `d_r`.
    FanIn,
    /// Aggregates indexed by `d_c`.
    FanOut,
}

impl Axis {
    pub fn file_stem(self) -> &'static str {
        match self {
            Axis::FanIn => "fan_in",
            Axis::FanOut => "fan_out",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub base: RunConfig,
    pub variants: Vec<Variant>,
    pub d_r: Vec<usize>,
    pub d_c: Vec<usize>,
    pub seeds: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub dir: PathBuf,
    /// Stop after training this many new cells (simulates an interruption).
    pub max_new_cells: Option<usize>,
}

impl SweepPlan {
    pub fn from_config(config: &RunConfig, dir: impl Into<PathBuf>) -> Self {
        let s = &config.sweep;
        Self {
            base: config.clone(),
            variants: s.variants.clone(),
            d_r: s.d_r.clone(),
            d_c: s.d_c.clone(),
            seeds: s.seeds,
            steps: s.steps,
            eval_every: s.eval_every,
            dir: dir.into(),
            max_new_cells: None,
        }
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &d_r in &self.d_r {
                for &d_c in &self.d_c {
                    for seed_index in 0..self.seeds {
                        out.push(CellKey {
                            index: out.len(),
                            variant,
                            d_r,
                            d_c,
                            seed_index,
                        });
                    }
                }
            }
        }
        out
    }

    /// Config of one cell; `seed` is the base seed plus the cell index.
    fn cell_config(&self, key: &CellKey) -> RunConfig {
        let mut c = self.base.clone();
        c.seed = self.base.seed.wrapping_add(key.index as u64);
        c.gate.kind = GateType::HyperGrid;
        c.gate.variant = key.variant;
        c.gate.d_r = key.d_r;
        c.gate.d_c = key.d_c;
        c.train.steps = self.steps;
        c.train.eval_every = self.eval_every;
        c
    }

    fn cell_dir(&self, key: &CellKey) -> PathBuf {
        self.dir.join("cells").join(key.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellKey {
    pub index: usize,
    pub variant: Variant,
    pub d_r: usize,
    pub d_c: usize,
    pub seed_index: usize,
}

impl CellKey {
    pub fn id(&self) -> String {
        format!("{}-r{}-c{}-s{}", self.variant, self.d_r, self.d_c, self.seed_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub seed: u64,
    pub best_macro_avg: f64,
    pub best_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub key: CellKey,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRow {
    pub value: usize,
    pub max: f64,
    pub mean: f64,
    pub min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisAggregate {
    pub variant: Variant,
    pub axis: Axis,
    pub rows: Vec<AxisRow>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
    pub skipped: Vec<SkippedCell>,
    /// Valid cells not yet trained.
    pub pending: usize,
    pub aggregates: Vec<AxisAggregate>,
}

impl SweepResult {
    pub fn is_complete(&self) -> bool {
        self.pending == 0
    }

    pub fn aggregate(&self, variant: Variant, axis: Axis) -> Option<&AxisAggregate> {
        self.aggregates.iter().find(|a| a.variant == variant && a.axis == axis)
    }
}

fn read_marker(path: &Path) -> Option<CellResult> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn run_cell(plan: &SweepPlan, mixture: &TaskMixture, key: &CellKey) -> Result<CellResult> {
    let config = plan.cell_config(key);
    let mut model = TransformerModel::new(config.model_config(), config.seed)?;
    let dir = plan.cell_dir(key);
    let outcome = harness::train_with(
        &mut model,
        mixture,
        &config.train_config(),
        config.seed,
        Some(&dir),
        false,
    )?;
    let result = CellResult {
        key: *key,
        seed: config.seed,
        best_macro_avg: outcome.best_macro_avg,
        best_step: outcome.best_step,
    };
    write_atomic(&dir.join(MARKER), &serde_json::to_string_pretty(&result)?)?;
    log::info!("cell {} done: best macro-average {:.4}", key.id(), result.best_macro_avg);
    Ok(result)
}

/// Runs every missing cell of `plan` (in parallel on the current rayon
/// pool), then aggregates and writes all outputs.
pub fn run_sweep(plan: &SweepPlan) -> Result<SweepResult> {
    if plan.seeds == 0 {
        return Err(Error::config("sweep.seeds", "must be at least 1"));
    }
    fs::create_dir_all(plan.dir.join("cells")).map_err(|e| Error::io(plan.dir.join("cells"), e))?;
    let mut done = Vec::new();
    let mut todo = Vec::new();
    let mut skipped = Vec::new();
    for key in plan.cells() {
        if let Err(e) = plan.cell_config(&key).validate() {
            log::warn!("skipping cell {}: {e}", key.id());
            skipped.push(SkippedCell {
                key,
                reason: e.to_string(),
            });
            continue;
        }
        match read_marker(&plan.cell_dir(&key).join(MARKER)) {
            Some(r) if r.key == key => done.push(r),
            _ => todo.push(key),
        }
    }
    let budget = plan.max_new_cells.unwrap_or(usize::MAX).min(todo.len());
    let pending = todo.len() - budget;
    // Task data comes from the base seed, so cells differ only in grid
    // shape and in the init/sampling seed.
    let mixture = plan.base.mixture()?;
    let fresh: Vec<Result<CellResult>> = todo[..budget]
        .par_iter()
        .map(|k| run_cell(plan, &mixture, k))
        .collect();
    for r in fresh {
        done.push(r?);
    }
    done.sort_by_key(|r| r.key.index);
    let aggregates = aggregate(&done, &plan.variants);
    let result = SweepResult {
        cells: done,
        skipped,
        pending,
        aggregates,
    };
    write_outputs(plan, &result)?;
    Ok(result)
}

/// Per-variant, per-axis max/mean/min of cell scores. Scores of repeated
/// seeds are averaged per (d_r, d_c) first.
pub fn aggregate(cells: &[CellResult], variants: &[Variant]) -> Vec<AxisAggregate> {
    let mut out = Vec::new();
    for &variant in variants {
        let mut per_cell: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for c in cells.iter().filter(|c| c.key.variant == variant) {
            per_cell.entry((c.key.d_r, c.key.d_c)).or_default().push(c.best_macro_avg);
        }
        let score: BTreeMap<(usize, usize), f64> = per_cell
            .into_iter()
            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        for axis in [Axis::FanIn, Axis::FanOut] {
            let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (&(r, c), &s) in &score {
                let key = if axis == Axis::FanIn { r } else { c };
                groups.entry(key).or_default().push(s);
            }
            let rows = groups
                .into_iter()
                .map(|(value, v)| AxisRow {
                    value,
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                })
                .collect();
            out.push(AxisAggregate { variant, axis, rows });
        }
    }
    out
}

pub const PLOT_HEADER: &str = "value,max,mean,min";

/// CSV text for one aggregate. Floats use the shortest representation that
/// parses back to the same value.
pub fn plot_csv(rows: &[AxisRow]) -> String {
    let mut s = format!("{PLOT_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.value, r.max, r.mean, r.min);
    }
    s
}

pub fn parse_plot_csv(text: &str) -> Result<Vec<AxisRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(PLOT_HEADER) {
        return Err(Error::Invalid(format!("plot data must start with `{PLOT_HEADER}`")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Invalid(format!("malformed plot row `{line}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(AxisRow {
                value: f[0].parse().map_err(|_| bad())?,
                max: num(f[1])?,
                mean: num(f[2])?,
                min: num(f[3])?,
            })
        })
        .collect()
}

pub fn plot_file(dir: &Path, variant: Variant, axis: Axis) -> PathBuf {
    dir.join(format!("{variant}_{}.csv", axis.file_stem()))
}

/// Writes one plot file per (variant, axis) in `dir`.
pub fn emit_plotdata(result: &SweepResult, variants: &[Variant], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for &variant in variants {
        for axis in [Axis::FanIn, Axis::FanOut] {
            let rows = result.aggregate(variant, axis).map(|a| a.rows.as_slice()).unwrap_or(&[]);
            let path = plot_file(dir, variant, axis);
            write_atomic(&path, &plot_csv(rows))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

pub const CELLS_HEADER: &str = "variant,d_r,d_c,seed_index,seed,best_macro_avg,best_step";

pub fn cells_csv(cells: &[CellResult]) -> String {
    let mut s = format!("{CELLS_HEADER}\n");
    for c in cells {
        let k = &c.key;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            k.variant, k.d_r, k.d_c, k.seed_index, c.seed, c.best_macro_avg, c.best_step
        );
    }
    s
}

fn report(plan: &SweepPlan, result: &SweepResult) -> String {
    let mut s = String::from("# Grid-size sweep\n\n");
    let _ = writeln!(
        s,
        "{} cells trained, {} pending, {} skipped; {} steps per cell.\n",
        result.cells.len(),
        result.pending,
        result.skipped.len(),
        plan.steps
    );
    for agg in &result.aggregates {
        let label = match agg.axis {
            Axis::FanIn => "d_r (fan-in)",
            Axis::FanOut => "d_c (fan-out)",
        };
        let _ = writeln!(s, "## {} by {label}\n\n| value | max | mean | min |\n|---|---|---|---|", agg.variant);
        for r in &agg.rows {
            let _ = writeln!(s, "| {} | {:.4} | {:.4} | {:.4} |", r.value, r.max, r.mean, r.min);
        }
        if agg.axis == Axis::FanOut {
            if let Some(best) = agg.rows.iter().max_by(|a, b| a.mean.total_cmp(&b.mean)) {
                let _ = writeln!(
                    s,
                    "\nBest mean fan-out granularity: d_c = {}.",
                    best.value
                );
            }
        }
        s.push('\n');
    }
    for sk in &result.skipped {
        let _ = writeln!(s, "- skipped {}: {}", sk.key.id(), sk.reason);
    }
    s
}

fn write_outputs(plan: &SweepPlan, result: &SweepResult) -> Result<()> {
    write_atomic(&plan.dir.join("cells.csv"), &cells_csv(&result.cells))?;
    emit_plotdata(result, &plan.variants, &plan.dir)?;
    write_atomic(&plan.dir.join("report.md"), &report(plan, result))
}
