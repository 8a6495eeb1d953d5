//! Finite-difference gradient checking.
//!
//! Probes only ever evaluate losses; nothing here calls `backward`.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tasks::Example;
use crate::transformer::TransformerModel;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_BUDGET: usize = 32;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-8;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn central_diff<F>(mut f: F, point: &[f64], coordinate: usize, step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if coordinate >= point.len() {
        return Err(Error::Invalid(format!(
            "coordinate {coordinate} out of range for {} values",
            point.len()
        )));
    }
    let mut probe = point.to_vec();
    probe[coordinate] = point[coordinate] + step;
    let plus = f(&probe);
    probe[coordinate] = point[coordinate] - step;
    let minus = f(&probe);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Invalid(format!(
            "non-finite loss while probing coordinate {coordinate}: f(+h) = {plus}, f(-h) = {minus}"
        )));
    }
    Ok((plus - minus) / (2.0 * step))
}

/// Relative error as `|a − n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn coordinate_passes(analytic: f64, numeric: f64) -> bool {
    relative_error(analytic, numeric) <= REL_TOL || (analytic - numeric).abs() <= ABS_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub block: String,
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    pub pass: bool,
    /// Coordinates excluded because the probe interval straddles a kink
    /// (see [`classify`]); not counted in `max_rel`/`max_abs`.
    #[serde(default)]
    pub kinks: usize,
    /// Failing coordinates, worst first (at most five).
    pub worst: Vec<Mismatch>,
}

impl CheckReport {
    pub fn vacuous(&self) -> bool {
        self.checked == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// The central difference disagrees, but one one-sided difference
    /// matches the analytic value and the two sides disagree with each
    /// other: the loss has a kink (a ReLU input crossing zero) inside
    /// `[x − h, x + h]` and the gradient on the smooth side is right.
    Kink,
    Fail,
}

/// Classifies one coordinate from `f(x − h)`, `f(x)`, `f(x + h)`.
pub fn classify(analytic: f64, minus: f64, base: f64, plus: f64, step: f64) -> Verdict {
    let central = (plus - minus) / (2.0 * step);
    if coordinate_passes(analytic, central) {
        return Verdict::Pass;
    }
    let forward = (plus - base) / step;
    let backward = (base - minus) / step;
    let one_side = coordinate_passes(analytic, forward) || coordinate_passes(analytic, backward);
    if one_side && !coordinate_passes(forward, backward) {
        Verdict::Kink
    } else {
        Verdict::Fail
    }
}

/// Compares `grads` (store order) against central differences of `loss` on
/// up to `budget` seeded-random coordinates of every parameter block.
pub fn check_blocks<L>(
    params: &ParamStore,
    loss: L,
    grads: &[Vec<f64>],
    budget: usize,
    seed: u64,
    step: f64,
) -> Result<Vec<CheckReport>>
where
    L: Fn(&ParamStore) -> Result<f64> + Sync,
{
    if budget == 0 {
        return Err(Error::config("gradcheck.budget", "must be at least 1"));
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::Invalid(format!("non-finite loss {base} at the check point")));
    }
    let ids: Vec<ParamId> = params.ids().collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let len = params.get(id).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(id.index() as u64));
        let mut coords: Vec<usize> = if len <= budget {
            (0..len).collect()
        } else {
            index::sample(&mut rng, len, budget).into_vec()
        };
        coords.sort_unstable();
        let probes: Vec<Result<(f64, f64)>> = coords
            .par_iter()
            .map(|&c| {
                let mut local = params.clone();
                let x = params.get(id).data()[c];
                let mut eval = |v: f64| -> Result<f64> {
                    local.get_mut(id).data_mut()[c] = v;
                    loss(&local)
                };
                let plus = eval(x + step)?;
                let minus = eval(x - step)?;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::Invalid(format!(
                        "non-finite loss probing `{}`[{c}]",
                        params.name(id)
                    )));
                }
                Ok((minus, plus))
            })
            .collect();
        let mut report = CheckReport {
            block: params.name(id).to_string(),
            checked: coords.len(),
            max_rel: 0.0,
            max_abs: 0.0,
            pass: true,
            kinks: 0,
            worst: Vec::new(),
        };
        let mut failures = Vec::new();
        for (&c, probe) in coords.iter().zip(probes) {
            let (minus, plus) = probe?;
            let a = grads[id.index()][c];
            let n = (plus - minus) / (2.0 * step);
            match classify(a, minus, base, plus, step) {
                Verdict::Kink => {
                    report.kinks += 1;
                    continue;
                }
                Verdict::Fail => failures.push(Mismatch {
                    index: c,
                    analytic: a,
                    numeric: n,
                }),
                Verdict::Pass => {}
            }
            report.max_rel = report.max_rel.max(relative_error(a, n));
            report.max_abs = report.max_abs.max((a - n).abs());
        }
        failures.sort_by(|x, y| {
            relative_error(y.analytic, y.numeric).total_cmp(&relative_error(x.analytic, x.numeric))
        });
        failures.truncate(5);
        report.pass = failures.is_empty();
        report.worst = failures;
        reports.push(report);
    }
    Ok(reports)
}

/// Checks every parameter block of `model` on the mean token loss of
/// `batch`.
pub fn check_model(model: &TransformerModel, batch: &[Example], budget: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let analytic = model.batch_gradients(batch)?;
    let loss = |p: &ParamStore| -> Result<f64> {
        let mut probe = model.clone();
        *probe.params_mut() = p.clone();
        probe.batch_loss(batch)
    };
    check_blocks(model.params(), loss, &analytic.grads, budget, seed, DEFAULT_STEP)
}

pub fn all_pass(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

/// Plain-text table, one row per block, followed by failing coordinates.
pub fn format_table(reports: &[CheckReport]) -> String {
    let width = reports.iter().map(|r| r.block.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>5}  {:>10}  {:>10}  result\n",
        "block", "coords", "kinks", "max_rel", "max_abs"
    );
    for r in reports {
        let result = match (r.vacuous(), r.pass) {
            (true, _) => "pass (empty)",
            (false, true) => "pass",
            (false, false) => "FAIL",
        };
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>5}  {:>10.3e}  {:>10.3e}  {result}",
            r.block, r.checked, r.kinks, r.max_rel, r.max_abs
        );
    }
    for r in reports.iter().filter(|r| !r.pass) {
        for m in &r.worst {
            let _ = writeln!(
                out,
                "  {}[{}]: analytic {:.6e}, numeric {:.6e}",
                r.block, m.index, m.analytic, m.numeric
            );
        }
    }
    out
}
