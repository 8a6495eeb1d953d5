//! Grid-wise hypernetwork gating of a projection matrix.
//!
//! A [`HyperGridLayer`] wraps a host projection `W[fan_in×fan_out]`, `b`
//! and scales `W` by a block-constant gate generated from a conditioning
//! vector `x`:
//!
//! | variant | gate grid                         | shape        |
//! |---------|-----------------------------------|--------------|
//! | `L`     | `σ(x·L_c)`                        | `1×n`        |
//! | `L2`    | `σ(outer(x·L_r, x·L_c))`          | `rows×cols`  |
//! | `LG`    | `σ(outer(x·L_r, G_c))`            | `rows×cols`  |
//! | `GL`    | `σ(outer(G_r, x·L_c))`            | `rows×cols`  |
//!
//! The grid is expanded by constant blocks of `(fan_in/rows)×(fan_out/cols)`
//! and the layer output keeps the ungated projection as a residual:
//! `Y = X·((1 + ψ(grid)) ⊙ W) + b`.
//!
//! The conditioning vector is the first row of the layer input by default
//! ([`pool_prefix`]); the transformer supplies its own.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the initial hypernetwork maps.
pub const HYPER_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    L,
    L2,
    LG,
    GL,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::L, Variant::L2, Variant::LG, Variant::GL];
    /// Variants with a two-axis grid.
    pub const GRID: [Variant; 3] = [Variant::L2, Variant::LG, Variant::GL];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::L => "L",
            Variant::L2 => "L2",
            Variant::LG => "LG",
            Variant::GL => "GL",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Variant::L),
            "L2" => Ok(Variant::L2),
            "LG" => Ok(Variant::LG),
            "GL" => Ok(Variant::GL),
            other => Err(Error::Invalid(format!(
                "unknown HyperGrid variant `{other}` (expected L, L2, LG or GL)"
            ))),
        }
    }
}

/// Geometry of one gated projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionDims {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Grid rows; partitions the fan-in.
    pub grid_rows: usize,
    /// Grid columns; partitions the fan-out.
    pub grid_cols: usize,
    /// Reduced gate width of variant `L`; `None` means `fan_out`.
    pub gate_width: Option<usize>,
    /// Width of the conditioning vector the hypernetwork maps read.
    pub cond_dim: usize,
}

impl ProjectionDims {
    /// Dims conditioned on the layer's own input (`cond_dim = fan_in`).
    pub fn new(fan_in: usize, fan_out: usize, grid_rows: usize, grid_cols: usize) -> Result<Self> {
        let dims = Self {
            fan_in,
            fan_out,
            grid_rows,
            grid_cols,
            gate_width: None,
            cond_dim: fan_in,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn with_gate_width(mut self, width: usize) -> Result<Self> {
        self.gate_width = Some(width);
        self.validate()?;
        Ok(self)
    }

    pub fn with_cond_dim(mut self, cond_dim: usize) -> Result<Self> {
        self.cond_dim = cond_dim;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let divides = |what: &str, part: usize, whole: usize, whole_name: &str| {
            if part == 0 || part > whole || whole % part != 0 {
                Err(Error::InvalidDims(format!(
                    "{what} = {part} must divide {whole_name} = {whole}"
                )))
            } else {
                Ok(())
            }
        };
        if self.fan_in == 0 || self.fan_out == 0 || self.cond_dim == 0 {
            return Err(Error::InvalidDims(format!(
                "fan_in, fan_out and cond_dim must be positive, got {self:?}"
            )));
        }
        divides("grid_rows", self.grid_rows, self.fan_in, "fan_in")?;
        divides("grid_cols", self.grid_cols, self.fan_out, "fan_out")?;
        if let Some(n) = self.gate_width {
            divides("gate_width", n, self.fan_out, "fan_out")?;
        }
        Ok(())
    }

    pub fn gate_width_or_full(&self) -> usize {
        self.gate_width.unwrap_or(self.fan_out)
    }

    /// Shape of the pre-expansion gate grid for a variant.
    pub fn grid_shape(&self, variant: Variant) -> (usize, usize) {
        match variant {
            Variant::L => (1, self.gate_width_or_full()),
            _ => (self.grid_rows, self.grid_cols),
        }
    }

    /// `(row_rep, col_rep)` block size of the expanded gate.
    pub fn block_shape(&self, variant: Variant) -> (usize, usize) {
        let (r, c) = self.grid_shape(variant);
        (self.fan_in / r, self.fan_out / c)
    }
}

/// Number of parameters a variant adds on top of the host `W` and `b`.
pub fn param_cost(variant: Variant, dims: &ProjectionDims) -> usize {
    let d = dims.cond_dim;
    match variant {
        Variant::L => d * dims.gate_width_or_full(),
        Variant::L2 => d * dims.grid_rows + d * dims.grid_cols,
        Variant::LG => d * dims.grid_rows + dims.grid_cols,
        Variant::GL => dims.grid_rows + d * dims.grid_cols,
    }
}

/// Alternative accounting that charges the column map of `L2` and `GL` as
/// `fan_out · grid_cols`, i.e. as if it read a `fan_out`-wide vector.
pub fn stated_param_cost(variant: Variant, dims: &ProjectionDims) -> usize {
    let d = dims.cond_dim;
    match variant {
        Variant::L => d * dims.gate_width_or_full(),
        Variant::L2 => d * dims.grid_rows + dims.fan_out * dims.grid_cols,
        Variant::LG => d * dims.grid_rows + dims.grid_cols,
        Variant::GL => dims.grid_rows + dims.fan_out * dims.grid_cols,
    }
}

/// Gate values for one conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGrid {
    /// Post-sigmoid grid.
    pub grid: Tensor,
    /// `grid` expanded by constant blocks to `fan_in×fan_out`.
    pub expanded: Tensor,
}

/// First row of a `ℓ×d` sequence.
pub fn pool_prefix(tape: &mut Tape, x: Var) -> Result<Var> {
    let (rows, _) = tape.value(x).dims2("pool_prefix")?;
    if rows == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(tape.select_row(x, 0)?)
}

/// `x[d] · map[d×k] → [k]`
pub(crate) fn apply_map(tape: &mut Tape, x: Var, map: Var) -> Result<Var> {
    let d = tape.value(x).len();
    let k = tape.value(map).shape().get(1).copied().unwrap_or(0);
    let row = tape.reshape(x, &[1, d])?;
    let out = tape.matmul(row, map)?;
    Ok(tape.reshape(out, &[k])?)
}

#[derive(Debug, Clone)]
pub struct HyperGridLayer {
    variant: Variant,
    dims: ProjectionDims,
    weight: ParamId,
    bias: ParamId,
    row_map: Option<ParamId>,
    col_map: Option<ParamId>,
    row_embed: Option<ParamId>,
    col_embed: Option<ParamId>,
    gate_override: Option<f64>,
}

impl HyperGridLayer {
    /// Allocates a host projection `{host}.weight`, `{host}.bias` and the
    /// hypernetwork parameters `{gate}.L_r`, `{gate}.L_c`, `{gate}.G_r`,
    /// `{gate}.G_c` required by the variant.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        host: &str,
        gate: &str,
        variant: Variant,
        dims: ProjectionDims,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate()?;
        let std = 1.0 / (dims.fan_in as f64).sqrt();
        let weight = store.add(format!("{host}.weight"), Tensor::randn(&[dims.fan_in, dims.fan_out], std, rng))?;
        let bias = store.add(format!("{host}.bias"), Tensor::zeros(&[dims.fan_out]))?;
        Self::with_host(store, weight, bias, gate, variant, dims, rng)
    }

    /// Gates an existing host projection.
    pub fn with_host<R: Rng + ?Sized>(
        store: &mut ParamStore,
        weight: ParamId,
        bias: ParamId,
        gate: &str,
        variant: Variant,
        dims: ProjectionDims,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate()?;
        if store.get(weight).shape() != [dims.fan_in, dims.fan_out] || store.get(bias).shape() != [dims.fan_out] {
            return Err(Error::InvalidDims(format!(
                "host projection {:?} + {:?} does not match {}×{}",
                store.get(weight).shape(),
                store.get(bias).shape(),
                dims.fan_in,
                dims.fan_out
            )));
        }
        let d = dims.cond_dim;
        let (rows, cols) = dims.grid_shape(variant);
        let mut map = |store: &mut ParamStore, name: &str, width: usize| {
            store.add(format!("{gate}.{name}"), Tensor::randn(&[d, width], HYPER_INIT_STD, rng))
        };
        let (row_map, col_map, row_embed, col_embed) = match variant {
            Variant::L => (None, Some(map(store, "L_c", cols)?), None, None),
            Variant::L2 => (Some(map(store, "L_r", rows)?), Some(map(store, "L_c", cols)?), None, None),
            Variant::LG => {
                let lr = map(store, "L_r", rows)?;
                let gc = store.add(format!("{gate}.G_c"), Tensor::zeros(&[cols]))?;
                (Some(lr), None, None, Some(gc))
            }
            Variant::GL => {
                let gr = store.add(format!("{gate}.G_r"), Tensor::zeros(&[rows]))?;
                let lc = map(store, "L_c", cols)?;
                (None, Some(lc), Some(gr), None)
            }
        };
        Ok(Self {
            variant,
            dims,
            weight,
            bias,
            row_map,
            col_map,
            row_embed,
            col_embed,
            gate_override: None,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dims(&self) -> &ProjectionDims {
        &self.dims
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// Hypernetwork parameters in `L_r, L_c, G_r, G_c` order.
    pub fn hyper_params(&self) -> Vec<ParamId> {
        [self.row_map, self.col_map, self.row_embed, self.col_embed]
            .into_iter()
            .flatten()
            .collect()
    }

    pub fn added_param_count(&self, store: &ParamStore) -> usize {
        self.hyper_params().iter().map(|&id| store.get(id).len()).sum()
    }

    /// Test hook: replaces every gate entry by a constant.
    pub fn set_gate_override(&mut self, value: Option<f64>) {
        self.gate_override = value;
    }

    /// Post-sigmoid gate grid on the tape.
    pub fn gate(&self, tape: &mut Tape, params: &Bound, cond: Var) -> Result<Var> {
        let got = tape.value(cond);
        if got.shape() != [self.dims.cond_dim] {
            return Err(Error::InvalidDims(format!(
                "conditioning vector has shape {:?}, layer expects [{}]",
                got.shape(),
                self.dims.cond_dim
            )));
        }
        let (rows, cols) = self.dims.grid_shape(self.variant);
        if let Some(value) = self.gate_override {
            return Ok(tape.constant(Tensor::filled(&[rows, cols], value)));
        }
        let local = |tape: &mut Tape, map: Option<ParamId>| -> Result<Var> {
            let map = map.expect("variant invariant");
            apply_map(tape, cond, params.var(map))
        };
        let logits = match self.variant {
            Variant::L => {
                let c = local(tape, self.col_map)?;
                tape.reshape(c, &[1, cols])?
            }
            Variant::L2 => {
                let r = local(tape, self.row_map)?;
                let c = local(tape, self.col_map)?;
                tape.outer(r, c)?
            }
            Variant::LG => {
                let r = local(tape, self.row_map)?;
                tape.outer(r, params.var(self.col_embed.expect("variant invariant")))?
            }
            Variant::GL => {
                let c = local(tape, self.col_map)?;
                tape.outer(params.var(self.row_embed.expect("variant invariant")), c)?
            }
        };
        Ok(tape.sigmoid(logits))
    }

    /// Evaluates the gate for a concrete conditioning vector.
    pub fn compute_gate(&self, store: &ParamStore, cond: &Tensor) -> Result<GateGrid> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false);
        let x = tape.constant(cond.clone());
        let grid = self.gate(&mut tape, &params, x)?;
        let (rr, cr) = self.dims.block_shape(self.variant);
        let expanded = tape.block_expand(grid, rr, cr)?;
        Ok(GateGrid {
            grid: tape.value(grid).clone(),
            expanded: tape.value(expanded).clone(),
        })
    }

    /// Gated projection of `x[ℓ×fan_in]` conditioned on its first row.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let cond = pool_prefix(tape, x)?;
        self.forward_conditioned(tape, params, x, cond)
    }

    /// `x · ((1 + ψ(gate(cond))) ⊙ W) + b`, one gate shared by every row.
    pub fn forward_conditioned(&self, tape: &mut Tape, params: &Bound, x: Var, cond: Var) -> Result<Var> {
        let grid = self.gate(tape, params, cond)?;
        let with_residual = tape.add_scalar(grid, 1.0);
        let projected = tape.grid_gated_matmul(x, params.var(self.weight), with_residual)?;
        self.add_bias(tape, params, projected)
    }

    /// Same result as [`Self::forward`] through the explicit route:
    /// materialize `ψ(gate) ⊙ W`, project, add the ungated projection.
    pub fn forward_dense(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let cond = pool_prefix(tape, x)?;
        let grid = self.gate(tape, params, cond)?;
        let (rr, cr) = self.dims.block_shape(self.variant);
        let expanded = tape.block_expand(grid, rr, cr)?;
        let w = params.var(self.weight);
        let gated_w = tape.mul(expanded, w)?;
        let gated = tape.matmul(x, gated_w)?;
        let plain = tape.matmul(x, w)?;
        let sum = tape.add(gated, plain)?;
        self.add_bias(tape, params, sum)
    }

    fn add_bias(&self, tape: &mut Tape, params: &Bound, y: Var) -> Result<Var> {
        let rows = tape.value(y).shape()[0];
        let b = tape.broadcast_rows(params.var(self.bias), rows)?;
        Ok(tape.add(y, b)?)
    }
}
