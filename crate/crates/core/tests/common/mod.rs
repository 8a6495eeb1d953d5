//! Independent reference implementations used by the integration tests.
//! Nothing here goes through the tape.

#![allow(dead_code)]

use hypergrid::tasks::vocab;
use hypergrid::{GateConfig, GateKind, ModelConfig, ParamStore, Tape, Tensor, Var, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn vec_map(x: &[f64], map: &Tensor) -> Vec<f64> {
    let cols = map.shape()[1];
    (0..cols)
        .map(|j| x.iter().enumerate().map(|(i, &xi)| xi * map.data()[i * cols + j]).sum())
        .collect()
}

/// Gate grid of a HyperGrid layer whose hypernetwork parameters live under
/// `{gate}.*` in `store`, for conditioning vector `cond`.
pub fn naive_grid(store: &ParamStore, gate: &str, variant: Variant, cond: &[f64]) -> Vec<Vec<f64>> {
    let get = |name: &str| store.get(store.id(&format!("{gate}.{name}")).expect(name));
    let (rows, cols): (Vec<f64>, Vec<f64>) = match variant {
        Variant::L => (vec![1.0], vec_map(cond, get("L_c"))),
        Variant::L2 => (vec_map(cond, get("L_r")), vec_map(cond, get("L_c"))),
        Variant::LG => (vec_map(cond, get("L_r")), get("G_c").data().to_vec()),
        Variant::GL => (get("G_r").data().to_vec(), vec_map(cond, get("L_c"))),
    };
    rows.iter()
        .map(|&r| {
            cols.iter()
                .map(|&c| if variant == Variant::L { sigmoid(c) } else { sigmoid(r * c) })
                .collect()
        })
        .collect()
}

/// Expands a `p×q` grid to `fan_in×fan_out` with an explicit index map.
pub fn naive_expand(grid: &[Vec<f64>], fan_in: usize, fan_out: usize) -> Vec<Vec<f64>> {
    let (p, q) = (grid.len(), grid[0].len());
    let (br, bc) = (fan_in / p, fan_out / q);
    (0..fan_in)
        .map(|i| (0..fan_out).map(|j| grid[i / br][j / bc]).collect())
        .collect()
}

/// `x · ((1 + ψ(grid)) ⊙ W) + b` with the gated matrix materialized and
/// the grid conditioned on `cond`.
pub fn naive_hypergrid(
    store: &ParamStore,
    host: &str,
    gate: &str,
    variant: Variant,
    x: &[Vec<f64>],
    cond: &[f64],
) -> Vec<Vec<f64>> {
    let w = store.get(store.id(&format!("{host}.weight")).unwrap());
    let b = store.get(store.id(&format!("{host}.bias")).unwrap());
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    let expanded = naive_expand(&naive_grid(store, gate, variant, cond), fan_in, fan_out);
    let mut gated = vec![vec![0.0; fan_out]; fan_in];
    for i in 0..fan_in {
        for j in 0..fan_out {
            gated[i][j] = (1.0 + expanded[i][j]) * w.data()[i * fan_out + j];
        }
    }
    x.iter()
        .map(|row| {
            (0..fan_out)
                .map(|j| b.data()[j] + (0..fan_in).map(|i| row[i] * gated[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// A geometry small enough for exhaustive checks but with every structural
/// piece of the desk model (two heads, encoder and decoder stacks).
pub fn small_model(kind: GateKind) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab::DIGIT_BASE + 10,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        layers_enc: 1,
        layers_dec: 1,
        max_len: 12,
        gate: GateConfig::both(kind),
    }
}

/// Every gate configuration exercised by the end-to-end checks.
pub fn gate_configs(d_r: usize, d_c: usize, blocked: usize) -> Vec<GateKind> {
    use hypergrid::OutGateMode;
    let hg = |variant| GateKind::HyperGrid { variant, d_r, d_c, n: None };
    vec![
        GateKind::None,
        hg(Variant::L),
        hg(Variant::L2),
        hg(Variant::LG),
        hg(Variant::GL),
        GateKind::OutGate(OutGateMode::Full),
        GateKind::OutGate(OutGateMode::Blocked(blocked)),
    ]
}

/// Adds `Σ y ⊙ R` for a fixed pseudo-random `R`, so that every output entry
/// reaches the loss with a distinct weight.
pub fn readout(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let weights = Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0x5eed));
    let r = tape.constant(weights);
    let prod = tape.mul(y, r).unwrap();
    tape.sum(prod)
}

/// Largest relative error between tape gradients and central differences
/// of the scalar built by `build`, over every input coordinate. Returns
/// `(passes, worst_rel)` under the usual mixed tolerance.
pub fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> (bool, f64) {
    use hypergrid::gradcheck::{coordinate_passes, relative_error, DEFAULT_STEP};
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let eval = |probe: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for c in 0..t.len() {
            let mut probe = inputs.to_vec();
            probe[k].data_mut()[c] += DEFAULT_STEP;
            let plus = eval(&probe);
            probe[k].data_mut()[c] -= 2.0 * DEFAULT_STEP;
            let minus = eval(&probe);
            let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
            let a = analytic[k][c];
            worst = worst.max(relative_error(a, numeric));
            pass &= coordinate_passes(a, numeric);
        }
    }
    (pass, worst)
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// A randomly shaped gated projection (all dims ≤ 16) with every
/// parameter, biases and hypernetwork maps included, drawn at a scale
/// where gates are far from 0.5.
pub struct RandomProjection {
    pub store: hypergrid::ParamStore,
    pub layer: hypergrid::HyperGridLayer,
    pub dims: hypergrid::ProjectionDims,
    pub x: Vec<Vec<f64>>,
}

pub fn random_projection(variant: Variant, r: &mut impl Rng) -> RandomProjection {
    use hypergrid::{HyperGridLayer, ProjectionDims};
    let fan_in = r.random_range(1..=16);
    let fan_out = r.random_range(1..=16);
    let pick = |r: &mut dyn rand::RngCore, n: usize| {
        let ds = divisors(n);
        ds[r.random_range(0..ds.len())]
    };
    let rows = pick(r, fan_in);
    let cols = pick(r, fan_out);
    let mut dims = ProjectionDims::new(fan_in, fan_out, rows, cols).unwrap();
    if variant == Variant::L && r.random_bool(0.5) {
        let n = pick(r, fan_out);
        dims = dims.with_gate_width(n).unwrap();
    }
    let mut store = ParamStore::new();
    let layer = HyperGridLayer::new(&mut store, "proj", "gate", variant, dims, r).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(&shape, 0.7, r)).unwrap();
    }
    let seq = r.random_range(1..=6);
    let x = rand_matrix(r, seq, fan_in);
    RandomProjection { store, layer, dims, x }
}

pub fn tensor_from_rows(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// A run config small enough to train many cells in a test.
pub fn tiny_run_config() -> hypergrid::RunConfig {
    let mut c = hypergrid::RunConfig::default();
    c.seed = 11;
    c.model.d_model = 8;
    c.model.d_ff = 16;
    c.model.layers_enc = 1;
    c.model.layers_dec = 1;
    c.model.max_len = 12;
    c.model.vocab_size = vocab::DIGIT_BASE + 4;
    c.gate.d_r = 2;
    c.gate.d_c = 2;
    c.tasks.train_sizes = vec![40, 30, 20, 20, 10];
    c.tasks.dev_size = 6;
    c.tasks.max_len = 3;
    c.tasks.symbols = 4;
    c.train.batch_size = 4;
    c.train.grad_chunk = 4;
    c.sweep.variants = vec![Variant::L2, Variant::LG, Variant::GL];
    c.sweep.d_r = vec![1, 2, 4, 8];
    c.sweep.d_c = vec![1, 2, 4, 8];
    c.sweep.steps = 4;
    c.sweep.eval_every = 2;
    c
}
