use std::cell::Cell;
use std::sync::Arc;

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind tag of a recorded op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Mul,
    Scale,
    AddScalar,
    Sigmoid,
    Relu,
    Outer,
    BlockExpand,
    BroadcastRows,
    SelectRow,
    GatherRows,
    SliceCols,
    ConcatCols,
    SoftmaxRows,
    LayerNorm,
    CrossEntropy,
    Sum,
    Reshape,
    GridGatedMatmul,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Outer,
        OpKind::BlockExpand,
        OpKind::BroadcastRows,
        OpKind::SelectRow,
        OpKind::GatherRows,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::Reshape,
        OpKind::GridGatedMatmul,
    ];
}

thread_local! {
    static INJECTED_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Restores the previous fault setting when dropped.
pub struct FaultGuard {
    previous: Option<OpKind>,
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        INJECTED_FAULT.with(|f| f.set(self.previous));
    }
}

/// Mutation-testing hook: tapes created on this thread while the guard is
/// alive flip the sign of every gradient the given op sends to its inputs.
#[doc(hidden)]
pub fn inject_backward_fault(kind: OpKind) -> FaultGuard {
    let previous = INJECTED_FAULT.with(|f| f.replace(Some(kind)));
    FaultGuard { previous }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Outer(Var, Var),
    BlockExpand {
        input: Var,
        row_rep: usize,
        col_rep: usize,
    },
    BroadcastRows(Var),
    SelectRow {
        input: Var,
        row: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
    GridGatedMatmul {
        input: Var,
        weight: Var,
        grid: Var,
        scaled_weight: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Outer(..) => OpKind::Outer,
            Op::BlockExpand { .. } => OpKind::BlockExpand,
            Op::BroadcastRows(_) => OpKind::BroadcastRows,
            Op::SelectRow { .. } => OpKind::SelectRow,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::Reshape(_) => OpKind::Reshape,
            Op::GridGatedMatmul { .. } => OpKind::GridGatedMatmul,
        })
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records ops for reverse-mode differentiation.
///
/// Gradients of leaves created with `requires_grad = true` accumulate across
/// [`Tape::backward`] calls until [`Tape::zero_grad`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn rank_err(op: &'static str, expected: usize, t: &Tensor) -> TensorError {
    TensorError::Rank {
        op,
        expected,
        shape: t.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: String) -> TensorError {
    TensorError::Invalid { op, msg }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: INJECTED_FAULT.with(Cell::get),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.shared_leaf(Arc::new(value), requires_grad)
    }

    /// Adds a leaf that shares storage with the caller (parameters).
    pub fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let shape = self.value(v).shape().to_vec();
        self.grad(v).map(|g| Tensor::new(shape, g.to_vec()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Arc::new(value), op, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("transpose")?;
        let src = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push_op(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(value, Op::Mul(a, b), &[a, b]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.map(a, |x| x * factor);
        self.push_op(value, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.map(a, |x| x + offset);
        self.push_op(value, Op::AddScalar(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, kernels::sigmoid);
        self.push_op(value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.max(0.0));
        self.push_op(value, Op::Relu(a), &[a])
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.rank() != 1 {
            return Err(rank_err("outer", 1, tu));
        }
        if tv.rank() != 1 {
            return Err(rank_err("outer", 1, tv));
        }
        let data = tu
            .data()
            .iter()
            .flat_map(|&x| tv.data().iter().map(move |&y| x * y))
            .collect();
        let value = Tensor::matrix(tu.len(), tv.len(), data)?;
        Ok(self.push_op(value, Op::Outer(u, v), &[u, v]))
    }

    /// Repeats every entry of a `p×q` matrix over a contiguous
    /// `row_rep×col_rep` block (Kronecker product with an all-ones block).
    pub fn block_expand(&mut self, g: Var, row_rep: usize, col_rep: usize) -> Result<Var> {
        let t = self.value(g);
        let (p, q) = t.dims2("block_expand")?;
        if row_rep == 0 || col_rep == 0 {
            return Err(invalid(
                "block_expand",
                format!("repeat counts must be >= 1, got ({row_rep}, {col_rep})"),
            ));
        }
        let cols = q * col_rep;
        let mut out = Vec::with_capacity(p * row_rep * cols);
        for i in 0..p {
            let row: Vec<f64> = t
                .row(i)
                .iter()
                .flat_map(|&x| std::iter::repeat_n(x, col_rep))
                .collect();
            for _ in 0..row_rep {
                out.extend_from_slice(&row);
            }
        }
        let value = Tensor::matrix(p * row_rep, cols, out)?;
        Ok(self.push_op(value, Op::BlockExpand { input: g, row_rep, col_rep }, &[g]))
    }

    /// Stacks a length-`n` vector into a `rows×n` matrix.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let t = self.value(v);
        if t.rank() != 1 {
            return Err(rank_err("broadcast_rows", 1, t));
        }
        let data = t.data().repeat(rows);
        let value = Tensor::matrix(rows, t.len(), data)?;
        Ok(self.push_op(value, Op::BroadcastRows(v), &[v]))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, _) = t.dims2("select_row")?;
        if row >= rows {
            return Err(invalid("select_row", format!("row {row} out of range for {rows} rows")));
        }
        let value = Tensor::vector(t.row(row).to_vec());
        Ok(self.push_op(value, Op::SelectRow { input: x, row }, &[x]))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(invalid("gather_rows", format!("id {id} out of range for {rows} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push_op(value, op, &[table]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2("slice_cols")?;
        if start + len > cols {
            return Err(invalid(
                "slice_cols",
                format!("columns {start}..{} out of range for {cols}", start + len),
            ));
        }
        let data = (0..rows).flat_map(|i| t.row(i)[start..start + len].iter().copied()).collect();
        let value = Tensor::matrix(rows, len, data)?;
        Ok(self.push_op(value, Op::SliceCols { input: x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_cols", "no inputs".into()))?;
        let (rows, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2("concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push_op(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// to probability zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2("softmax_rows")?;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let visible = if causal { (i + 1).min(cols) } else { cols };
            let row = &t.row(i)[..visible];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * cols..i * cols + visible];
            let mut total = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let value = Tensor::matrix(rows, cols, out)?;
        Ok(self.push_op(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of row width).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = t.dims2("layer_norm")?;
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [cols] {
            return Err(mismatch("layer_norm", t, tg));
        }
        if tb.shape() != [cols] {
            return Err(mismatch("layer_norm", t, tb));
        }
        let mut normalized = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            for (j, &v) in row.iter().enumerate() {
                let n = (v - mean) * s;
                normalized.push(n);
                out.push(n * tg.data()[j] + tb.data()[j]);
            }
        }
        let value = Tensor::matrix(rows, cols, out)?;
        let op = Op::LayerNorm {
            input: x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        Ok(self.push_op(value, op, &[x, gain, bias]))
    }

    /// Summed negative log-likelihood of `targets[i]` under the softmax of
    /// row `i` of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = t.dims2("cross_entropy")?;
        if targets.len() != rows {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            if target >= cols {
                return Err(invalid("cross_entropy", format!("target {target} out of range for {cols}")));
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += log_z - row[target];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push_op(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push_op(value, Op::Reshape(a), &[a]))
    }

    /// `x · (ψ(grid) ⊙ weight)` where ψ expands `grid[r×c]` to the shape of
    /// `weight[p×q]` by constant blocks. The expanded gate is never built.
    pub fn grid_gated_matmul(&mut self, x: Var, weight: Var, grid: Var) -> Result<Var> {
        let (tx, tw, tg) = (self.value(x), self.value(weight), self.value(grid));
        let (m, k) = tx.dims2("grid_gated_matmul")?;
        let (p, q) = tw.dims2("grid_gated_matmul")?;
        let (r, c) = tg.dims2("grid_gated_matmul")?;
        if k != p {
            return Err(mismatch("grid_gated_matmul", tx, tw));
        }
        if r == 0 || c == 0 || p % r != 0 || q % c != 0 {
            return Err(mismatch("grid_gated_matmul", tw, tg));
        }
        let scaled_weight = kernels::scale_by_grid(tw.data(), tg.data(), p, q, r, c);
        let out = kernels::matmul(tx.data(), &scaled_weight, m, k, q);
        let value = Tensor::matrix(m, q, out)?;
        let op = Op::GridGatedMatmul {
            input: x,
            weight,
            grid,
            scaled_weight,
        };
        Ok(self.push_op(value, op, &[x, weight, grid]))
    }

    /// Back-propagates from a scalar `loss`, adding into the gradients of
    /// every reachable leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.rank() != 0 {
            return Err(rank_err("backward", 0, lt));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = local[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if self.grads.len() < self.nodes.len() {
                    self.grads.resize(self.nodes.len(), None);
                }
                match &mut self.grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&upstream).for_each(|(a, g)| *a += g),
                    slot => *slot = Some(upstream),
                }
                continue;
            }
            let faulty = self.fault.is_some() && node.op.kind() == self.fault;
            if let (Op::MatMul(a, b), false) = (&node.op, faulty) {
                // Accumulate straight into the consumers' buffers: weight
                // matrices are reused by every example in a batch.
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(*a) {
                    let da = local[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    kernels::matmul_grad_lhs(da, &upstream, tb.data(), m, k, n);
                }
                if self.wants(*b) {
                    let db = local[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    kernels::matmul_grad_rhs(db, ta.data(), &upstream, m, k, n);
                }
                continue;
            }
            let sign = if faulty { -1.0 } else { 1.0 };
            for (input, mut contribution) in self.input_grads(idx, &upstream) {
                if sign < 0.0 {
                    contribution.iter_mut().for_each(|g| *g = -*g);
                }
                match &mut local[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, g)| *a += g),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn input_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut grads = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_grad_lhs(&mut da, g, tb.data(), m, k, n);
                    grads.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_grad_rhs(&mut db, ta.data(), g, m, k, n);
                    grads.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[1], out.shape()[0]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                grads.push((*a, da));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        grads.push((v, g.to_vec()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    grads.push((*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    grads.push((*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(a, factor) => grads.push((*a, g.iter().map(|g| g * factor).collect())),
            Op::AddScalar(a) => grads.push((*a, g.to_vec())),
            Op::Sigmoid(a) => {
                let da = g.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                grads.push((*a, da));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da = g.iter().zip(x).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                grads.push((*a, da));
            }
            Op::Outer(u, v) => {
                let (tu, tv) = (self.value(*u), self.value(*v));
                let (p, q) = (tu.len(), tv.len());
                if self.wants(*u) {
                    let du = (0..p).map(|i| kernels::dot(&g[i * q..(i + 1) * q], tv.data())).collect();
                    grads.push((*u, du));
                }
                if self.wants(*v) {
                    let mut dv = vec![0.0; q];
                    for (i, &ui) in tu.data().iter().enumerate() {
                        for (d, &gij) in dv.iter_mut().zip(&g[i * q..(i + 1) * q]) {
                            *d += gij * ui;
                        }
                    }
                    grads.push((*v, dv));
                }
            }
            Op::BlockExpand {
                input,
                row_rep,
                col_rep,
            } => {
                let (p, q) = (out.shape()[0], out.shape()[1]);
                let sums = kernels::block_sum(g, p, q, p / row_rep, q / col_rep);
                grads.push((*input, sums));
            }
            Op::BroadcastRows(v) => {
                let n = out.shape()[1];
                let mut dv = vec![0.0; n];
                for row in g.chunks(n) {
                    dv.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                grads.push((*v, dv));
            }
            Op::SelectRow { input, row } => {
                let t = self.value(*input);
                let n = t.shape()[1];
                let mut dx = vec![0.0; t.len()];
                dx[row * n..(row + 1) * n].copy_from_slice(g);
                grads.push((*input, dx));
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let n = t.shape()[1];
                let mut dt = vec![0.0; t.len()];
                for (i, &id) in ids.iter().enumerate() {
                    dt[id * n..(id + 1) * n]
                        .iter_mut()
                        .zip(&g[i * n..(i + 1) * n])
                        .for_each(|(d, g)| *d += g);
                }
                grads.push((*table, dt));
            }
            Op::SliceCols { input, start } => {
                let t = self.value(*input);
                let (rows, cols) = (t.shape()[0], t.shape()[1]);
                let len = out.shape()[1];
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    dx[i * cols + start..i * cols + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                grads.push((*input, dx));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).shape()[1];
                    if self.wants(p) {
                        let dp = (0..rows)
                            .flat_map(|i| g[i * total + offset..i * total + offset + width].iter().copied())
                            .collect();
                        grads.push((p, dp));
                    }
                    offset += width;
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = out.shape()[1];
                let mut dx = vec![0.0; out.len()];
                for ((d, p), gr) in dx.chunks_mut(cols).zip(out.data().chunks(cols)).zip(g.chunks(cols)) {
                    let inner = kernels::dot(p, gr);
                    for ((d, &p), &gv) in d.iter_mut().zip(p).zip(gr) {
                        *d = p * (gv - inner);
                    }
                }
                grads.push((*x, dx));
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = out.shape()[1];
                let gain_v = self.value(*gain).data();
                if self.wants(*input) {
                    let mut dx = vec![0.0; out.len()];
                    for (i, s) in inv_std.iter().enumerate() {
                        let range = i * cols..(i + 1) * cols;
                        let gr = &g[range.clone()];
                        let nr = &normalized[range.clone()];
                        let dn: Vec<f64> = gr.iter().zip(gain_v).map(|(g, w)| g * w).collect();
                        let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                        let mean_dn_n = kernels::dot(&dn, nr) / cols as f64;
                        for ((d, &dnj), &nj) in dx[range].iter_mut().zip(&dn).zip(nr) {
                            *d = s * (dnj - mean_dn - nj * mean_dn_n);
                        }
                    }
                    grads.push((*input, dx));
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; cols];
                    for (gr, nr) in g.chunks(cols).zip(normalized.chunks(cols)) {
                        for ((d, g), n) in dg.iter_mut().zip(gr).zip(nr) {
                            *d += g * n;
                        }
                    }
                    grads.push((*gain, dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; cols];
                    for gr in g.chunks(cols) {
                        db.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                    grads.push((*bias, db));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.value(*logits).shape()[1];
                let scale = g[0];
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * cols + t] -= scale;
                }
                grads.push((*logits, dl));
            }
            Op::Sum(a) => grads.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Reshape(a) => grads.push((*a, g.to_vec())),
            Op::GridGatedMatmul {
                input,
                weight,
                grid,
                scaled_weight,
            } => {
                let (tx, tw, tg) = (self.value(*input), self.value(*weight), self.value(*grid));
                let (m, k) = (tx.shape()[0], tx.shape()[1]);
                let q = tw.shape()[1];
                let (r, c) = (tg.shape()[0], tg.shape()[1]);
                if self.wants(*input) {
                    let mut dx = vec![0.0; m * k];
                    kernels::matmul_grad_lhs(&mut dx, g, scaled_weight, m, k, q);
                    grads.push((*input, dx));
                }
                if self.wants(*weight) || self.wants(*grid) {
                    let mut xt_g = vec![0.0; k * q];
                    kernels::matmul_grad_rhs(&mut xt_g, tx.data(), g, m, k, q);
                    if self.wants(*grid) {
                        let prod: Vec<f64> = xt_g.iter().zip(tw.data()).map(|(a, w)| a * w).collect();
                        grads.push((*grid, kernels::block_sum(&prod, k, q, r, c)));
                    }
                    if self.wants(*weight) {
                        grads.push((*weight, kernels::scale_by_grid(&xt_g, tg.data(), k, q, r, c)));
                    }
                }
            }
        }
        grads
    }
}
