//! Every tape op against central differences, and every op's backward
//! pass against a sign-flip mutation of itself.

mod common;

use common::{fd_check, readout, rng};
use hypergrid::tensor::{inject_backward_fault, OpKind};
use hypergrid::{Tape, Tensor, Var};
use proptest::prelude::*;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

struct Case {
    kind: OpKind,
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Values bounded away from zero so that `relu` is differentiable at
/// every probe.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = randn(shape, seed);
    t.data_mut().iter_mut().for_each(|v| *v += 0.2 * v.signum());
    t
}

fn case(kind: OpKind, name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Case {
    Case {
        kind,
        name,
        inputs,
        build: Box::new(f),
    }
}

fn cases() -> Vec<Case> {
    vec![
        case(OpKind::MatMul, "matmul", vec![randn(&[3, 4], 1), randn(&[4, 2], 2)], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            readout(t, y, 1)
        }),
        case(OpKind::Transpose, "transpose", vec![randn(&[3, 2], 3)], |t, v| {
            let y = t.transpose(v[0]).unwrap();
            readout(t, y, 2)
        }),
        case(OpKind::Add, "add", vec![randn(&[2, 3], 4), randn(&[2, 3], 5)], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            readout(t, y, 3)
        }),
        case(OpKind::Mul, "mul", vec![randn(&[2, 3], 6), randn(&[2, 3], 7)], |t, v| {
            // The readout multiplies too; a sigmoid readout keeps the mutated
            // op count odd.
            let y = t.mul(v[0], v[1]).unwrap();
            let s = t.sigmoid(y);
            t.sum(s)
        }),
        case(OpKind::Scale, "scale", vec![randn(&[4], 8)], |t, v| {
            let y = t.scale(v[0], -1.7);
            readout(t, y, 5)
        }),
        case(OpKind::AddScalar, "add_scalar", vec![randn(&[2, 2], 9)], |t, v| {
            let y = t.add_scalar(v[0], 0.3);
            readout(t, y, 6)
        }),
        case(OpKind::Sigmoid, "sigmoid", vec![randn(&[3, 3], 10)], |t, v| {
            let y = t.sigmoid(v[0]);
            readout(t, y, 7)
        }),
        case(OpKind::Relu, "relu", vec![away_from_zero(&[3, 3], 11)], |t, v| {
            let y = t.relu(v[0]);
            readout(t, y, 8)
        }),
        case(OpKind::Outer, "outer", vec![randn(&[3], 12), randn(&[4], 13)], |t, v| {
            let y = t.outer(v[0], v[1]).unwrap();
            readout(t, y, 9)
        }),
        case(OpKind::BlockExpand, "block_expand", vec![randn(&[2, 3], 14)], |t, v| {
            let y = t.block_expand(v[0], 2, 3).unwrap();
            readout(t, y, 10)
        }),
        case(OpKind::BroadcastRows, "broadcast_rows", vec![randn(&[3], 15)], |t, v| {
            let y = t.broadcast_rows(v[0], 4).unwrap();
            readout(t, y, 11)
        }),
        case(OpKind::SelectRow, "select_row", vec![randn(&[3, 4], 16)], |t, v| {
            let y = t.select_row(v[0], 1).unwrap();
            readout(t, y, 12)
        }),
        case(OpKind::GatherRows, "gather_rows", vec![randn(&[5, 3], 17)], |t, v| {
            let y = t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap();
            readout(t, y, 13)
        }),
        case(OpKind::SliceCols, "slice_cols", vec![randn(&[3, 5], 18)], |t, v| {
            let y = t.slice_cols(v[0], 1, 3).unwrap();
            readout(t, y, 14)
        }),
        case(OpKind::ConcatCols, "concat_cols", vec![randn(&[2, 2], 19), randn(&[2, 3], 20)], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]]).unwrap();
            readout(t, y, 15)
        }),
        case(OpKind::SoftmaxRows, "softmax_rows", vec![randn(&[3, 4], 21)], |t, v| {
            let y = t.softmax_rows(v[0], false).unwrap();
            readout(t, y, 16)
        }),
        case(OpKind::SoftmaxRows, "softmax_rows_causal", vec![randn(&[4, 4], 22)], |t, v| {
            let y = t.softmax_rows(v[0], true).unwrap();
            readout(t, y, 17)
        }),
        case(
            OpKind::LayerNorm,
            "layer_norm",
            vec![randn(&[3, 4], 23), randn(&[4], 24), randn(&[4], 25)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                readout(t, y, 18)
            },
        ),
        case(OpKind::CrossEntropy, "cross_entropy", vec![randn(&[3, 5], 26)], |t, v| {
            t.cross_entropy(v[0], &[4, 0, 2]).unwrap()
        }),
        case(OpKind::Sum, "sum", vec![randn(&[2, 3], 27)], |t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.sum(sq)
        }),
        case(OpKind::Reshape, "reshape", vec![randn(&[2, 3], 28)], |t, v| {
            let y = t.reshape(v[0], &[3, 2]).unwrap();
            readout(t, y, 19)
        }),
        case(
            OpKind::GridGatedMatmul,
            "grid_gated_matmul",
            vec![randn(&[3, 4], 29), randn(&[4, 6], 30), randn(&[2, 3], 31)],
            |t, v| {
                let y = t.grid_gated_matmul(v[0], v[1], v[2]).unwrap();
                readout(t, y, 20)
            },
        ),
    ]
}

#[test]
fn every_op_kind_has_a_case() {
    let cases = cases();
    for kind in OpKind::ALL {
        assert!(cases.iter().any(|c| c.kind == kind), "no case for {kind:?}");
    }
}

#[test]
fn gradients_match_central_differences() {
    for c in cases() {
        let (pass, worst) = fd_check(&c.inputs, &*c.build);
        assert!(pass, "{}: worst relative error {worst:.3e}", c.name);
    }
}

#[test]
fn sign_flipped_backward_is_caught() {
    for c in cases() {
        let _fault = inject_backward_fault(c.kind);
        let (pass, _) = fd_check(&c.inputs, &*c.build);
        assert!(!pass, "{}: mutated backward went unnoticed", c.name);
    }
}

#[test]
fn fault_is_scoped_to_the_guard() {
    let c = &cases()[0];
    {
        let _fault = inject_backward_fault(OpKind::MatMul);
        assert!(!fd_check(&c.inputs, &*c.build).0);
    }
    assert!(fd_check(&c.inputs, &*c.build).0);
}

#[test]
fn gradients_accumulate_over_reuse() {
    // y = x·x + x, so dy/dx = 2x + 1 elementwise.
    let x0 = Tensor::vector(vec![0.5, -2.0, 3.0]);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let y = tape.add(sq, x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let expected: Vec<f64> = x0.data().iter().map(|v| 2.0 * v + 1.0).collect();
    assert_eq!(tape.grad(x).unwrap(), expected.as_slice());
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]), true);
    let y = tape.mul(a, b).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(a).is_none());
    assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0]);
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape.matmul(a, b).is_err());
    assert!(tape.block_expand(a, 0, 1).is_err());
    assert!(tape.select_row(a, 2).is_err());
    assert!(tape.slice_cols(a, 2, 2).is_err());
    assert!(tape.cross_entropy(a, &[0]).is_err());
    assert!(tape.cross_entropy(a, &[0, 3]).is_err());
    let g = tape.constant(Tensor::zeros(&[2, 2]));
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(tape.grid_gated_matmul(x, a, g).is_err());
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..9, k in 1usize..17, n in 1usize..9, seed in any::<u64>()) {
        let a = randn(&[m, k], seed);
        let b = randn(&[k, n], seed.wrapping_add(1));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = tape.matmul(va, vb).unwrap();
        let expected = naive_matmul(a.data(), b.data(), m, k, n);
        for (got, want) in tape.value(y).data().iter().zip(&expected) {
            prop_assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn block_expand_repeats_each_entry(p in 1usize..4, q in 1usize..4, rr in 1usize..4, cr in 1usize..4, seed in any::<u64>()) {
        let g = randn(&[p, q], seed);
        let mut tape = Tape::new();
        let v = tape.constant(g.clone());
        let e = tape.block_expand(v, rr, cr).unwrap();
        let e = tape.value(e);
        prop_assert_eq!(e.shape(), &[p * rr, q * cr]);
        for i in 0..p * rr {
            for j in 0..q * cr {
                prop_assert_eq!(e.at(i, j), g.at(i / rr, j / cr));
            }
        }
    }

    #[test]
    fn grid_gated_matmul_equals_explicit_gating(
        m in 1usize..5, r in 1usize..4, c in 1usize..4, br in 1usize..4, bc in 1usize..4, seed in any::<u64>()
    ) {
        let (k, n) = (r * br, c * bc);
        let x = randn(&[m, k], seed);
        let w = randn(&[k, n], seed ^ 1);
        let g = randn(&[r, c], seed ^ 2);
        let mut tape = Tape::new();
        let (vx, vw, vg) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(g.clone()));
        let y = tape.grid_gated_matmul(vx, vw, vg).unwrap();
        let mut gated = w.data().to_vec();
        for i in 0..k {
            for j in 0..n {
                gated[i * n + j] *= g.at(i / br, j / bc);
            }
        }
        let expected = naive_matmul(x.data(), &gated, m, k, n);
        for (got, want) in tape.value(y).data().iter().zip(&expected) {
            prop_assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..6, causal in any::<bool>(), seed in any::<u64>()) {
        let x = randn(&[rows, cols], seed);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let p = tape.softmax_rows(v, causal).unwrap();
        let p = tape.value(p);
        for i in 0..rows {
            let row = p.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if causal {
                prop_assert!(row[(i + 1).min(cols)..].iter().all(|&v| v == 0.0));
            }
        }
    }
}
