//! Output gating baseline: `Y = relu(X·W + b) ⊙ expand(σ(x·U))`.
//!
//! Unlike HyperGrid the gate scales layer outputs rather than weights, only
//! along the fan-out axis, and there is no residual path.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergrid::{apply_map, pool_prefix, HYPER_INIT_STD};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutGateMode {
    /// One gate per output unit.
    Full,
    /// `n` gates, each repeated over `fan_out / n` consecutive units.
    Blocked(usize),
}

impl OutGateMode {
    pub fn gate_width(self, fan_out: usize) -> usize {
        match self {
            OutGateMode::Full => fan_out,
            OutGateMode::Blocked(n) => n,
        }
    }
}

impl fmt::Display for OutGateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutGateMode::Full => f.write_str("OutGate(Full)"),
            OutGateMode::Blocked(n) => write!(f, "OutGate({n})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutGateLayer {
    mode: OutGateMode,
    fan_in: usize,
    fan_out: usize,
    cond_dim: usize,
    weight: ParamId,
    bias: ParamId,
    gate_map: ParamId,
}

impl OutGateLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        host: &str,
        gate: &str,
        mode: OutGateMode,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{host}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng))?;
        let bias = store.add(format!("{host}.bias"), Tensor::zeros(&[fan_out]))?;
        Self::with_host(store, weight, bias, gate, mode, fan_in, rng)
    }

    /// Gates an existing `fan_in×fan_out` host projection. `cond_dim` is the
    /// width of the conditioning vector.
    pub fn with_host<R: Rng + ?Sized>(
        store: &mut ParamStore,
        weight: ParamId,
        bias: ParamId,
        gate: &str,
        mode: OutGateMode,
        cond_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (fan_in, fan_out) = store.get(weight).dims2("outgate")?;
        if store.get(bias).shape() != [fan_out] {
            return Err(Error::InvalidDims(format!(
                "outgate bias {:?} does not match fan_out {fan_out}",
                store.get(bias).shape()
            )));
        }
        let n = mode.gate_width(fan_out);
        if n == 0 || fan_out % n != 0 {
            return Err(Error::InvalidDims(format!(
                "outgate width {n} must divide fan_out = {fan_out}"
            )));
        }
        let gate_map = store.add(format!("{gate}.U"), Tensor::randn(&[cond_dim, n], HYPER_INIT_STD, rng))?;
        Ok(Self {
            mode,
            fan_in,
            fan_out,
            cond_dim,
            weight,
            bias,
            gate_map,
        })
    }

    pub fn mode(&self) -> OutGateMode {
        self.mode
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn gate_map(&self) -> ParamId {
        self.gate_map
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn added_param_count(&self, store: &ParamStore) -> usize {
        store.get(self.gate_map).len()
    }

    /// Gate vector `σ(cond·U)` of width `n`.
    pub fn gate(&self, tape: &mut Tape, params: &Bound, cond: Var) -> Result<Var> {
        if tape.value(cond).shape() != [self.cond_dim] {
            return Err(Error::InvalidDims(format!(
                "conditioning vector has shape {:?}, outgate expects [{}]",
                tape.value(cond).shape(),
                self.cond_dim
            )));
        }
        let logits = apply_map(tape, cond, params.var(self.gate_map))?;
        Ok(tape.sigmoid(logits))
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let cond = pool_prefix(tape, x)?;
        self.forward_conditioned(tape, params, x, cond)
    }

    pub fn forward_conditioned(&self, tape: &mut Tape, params: &Bound, x: Var, cond: Var) -> Result<Var> {
        let rows = tape.value(x).dims2("outgate")?.0;
        let pre = tape.matmul(x, params.var(self.weight))?;
        let b = tape.broadcast_rows(params.var(self.bias), rows)?;
        let pre = tape.add(pre, b)?;
        let hidden = tape.relu(pre);

        let gate = self.gate(tape, params, cond)?;
        let n = tape.value(gate).len();
        let gate = tape.reshape(gate, &[1, n])?;
        let gate = tape.block_expand(gate, 1, self.fan_out / n)?;
        let gate = tape.reshape(gate, &[self.fan_out])?;
        let gate = tape.broadcast_rows(gate, rows)?;
        Ok(tape.mul(hidden, gate)?)
    }
}
