//! HyperGrid and OutGate layers against loop-based oracles, plus the
//! structural properties of their gates.

mod common;

use common::*;
use hypergrid::tasks::vocab;
use hypergrid::{
    param_cost, Block, GateKind, OutGateLayer, OutGateMode, ParamStore, ProjectionDims, Tape, Tensor,
    TransformerModel, Variant,
};
use proptest::prelude::*;

fn forward(p: &RandomProjection, dense: bool) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let params = p.store.bind(&mut tape, false);
    let x = tape.constant(tensor_from_rows(&p.x));
    let y = if dense {
        p.layer.forward_dense(&mut tape, &params, x).unwrap()
    } else {
        p.layer.forward(&mut tape, &params, x).unwrap()
    };
    to_rows(tape.value(y))
}

#[test]
fn fused_and_dense_routes_match_the_loop_oracle() {
    let mut r = rng(100);
    for variant in Variant::ALL {
        for _ in 0..40 {
            let p = random_projection(variant, &mut r);
            let expected = naive_hypergrid(&p.store, "proj", "gate", variant, &p.x, &p.x[0]);
            assert!(max_abs_diff(&forward(&p, false), &expected) <= 1e-12, "{variant} {:?}", p.dims);
            assert!(max_abs_diff(&forward(&p, true), &expected) <= 1e-12, "{variant} {:?}", p.dims);
        }
    }
}

#[test]
fn allocated_parameters_equal_the_cost_formula() {
    let mut r = rng(101);
    for variant in Variant::ALL {
        for _ in 0..20 {
            let p = random_projection(variant, &mut r);
            assert_eq!(p.layer.added_param_count(&p.store), param_cost(variant, &p.dims));
        }
    }
    // Hand-computed at fan_in 12, fan_out 6, grid 3×2 (cond_dim = 12).
    let dims = ProjectionDims::new(12, 6, 3, 2).unwrap();
    assert_eq!(param_cost(Variant::L, &dims), 12 * 6);
    assert_eq!(param_cost(Variant::L2, &dims), 12 * 3 + 12 * 2);
    assert_eq!(param_cost(Variant::LG, &dims), 12 * 3 + 2);
    assert_eq!(param_cost(Variant::GL, &dims), 3 + 12 * 2);
    let narrow = dims.with_gate_width(3).unwrap();
    assert_eq!(param_cost(Variant::L, &narrow), 12 * 3);
}

#[test]
fn indivisible_grids_are_rejected() {
    assert!(ProjectionDims::new(12, 6, 5, 2).is_err());
    assert!(ProjectionDims::new(12, 6, 3, 4).is_err());
    assert!(ProjectionDims::new(12, 6, 0, 2).is_err());
    assert!(ProjectionDims::new(12, 6, 24, 2).is_err());
    assert!(ProjectionDims::new(12, 6, 3, 2).unwrap().with_gate_width(4).is_err());
}

#[test]
fn outgate_matches_the_loop_oracle() {
    let mut r = rng(102);
    for mode in [OutGateMode::Full, OutGateMode::Blocked(2), OutGateMode::Blocked(1)] {
        let (fan_in, fan_out, seq) = (5, 6, 4);
        let mut store = ParamStore::new();
        let layer = OutGateLayer::new(&mut store, "proj", "gate", mode, fan_in, fan_out, &mut r).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.7, &mut r)).unwrap();
        }
        let x = rand_matrix(&mut r, seq, fan_in);
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false);
        let xv = tape.constant(tensor_from_rows(&x));
        let y = layer.forward(&mut tape, &params, xv).unwrap();

        let get = |n: &str| store.get(store.id(n).unwrap()).clone();
        let (w, b, u) = (get("proj.weight"), get("proj.bias"), get("gate.U"));
        let n = mode.gate_width(fan_out);
        let gate: Vec<f64> = (0..n)
            .map(|k| sigmoid((0..fan_in).map(|i| x[0][i] * u.at(i, k)).sum()))
            .collect();
        let expected: Vec<Vec<f64>> = x
            .iter()
            .map(|row| {
                (0..fan_out)
                    .map(|j| {
                        let pre = b.data()[j] + (0..fan_in).map(|i| row[i] * w.at(i, j)).sum::<f64>();
                        pre.max(0.0) * gate[j / (fan_out / n)]
                    })
                    .collect()
            })
            .collect();
        assert!(max_abs_diff(&to_rows(tape.value(y)), &expected) <= 1e-12, "{mode}");
        assert_eq!(layer.added_param_count(&store), fan_in * n);
    }
}

#[test]
fn l2_ffn_gradients_match_finite_differences() {
    // Standalone HyperGrid-L2 FFN: relu(x·W1 + b1) → gated W2, d_m = 6,
    // d_f = 12, grid 2×3, conditioned on the first input row.
    let (d_m, d_f) = (6, 12);
    let mut r = rng(103);
    let mut store = ParamStore::new();
    let w1 = store.add("ffn.w1", Tensor::randn(&[d_m, d_f], 0.5, &mut r)).unwrap();
    let b1 = store.add("ffn.b1", Tensor::randn(&[d_f], 0.5, &mut r)).unwrap();
    let w2 = store.add("ffn.w2", Tensor::randn(&[d_f, d_m], 0.5, &mut r)).unwrap();
    let b2 = store.add("ffn.b2", Tensor::randn(&[d_m], 0.5, &mut r)).unwrap();
    let dims = ProjectionDims::new(d_f, d_m, 2, 3).unwrap().with_cond_dim(d_m).unwrap();
    let layer = hypergrid::HyperGridLayer::with_host(&mut store, w2, b2, "hg", Variant::L2, dims, &mut r).unwrap();
    for id in layer.hyper_params() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(&shape, 0.5, &mut r)).unwrap();
    }
    let x = Tensor::randn(&[4, d_m], 1.0, &mut r);
    let loss_on = |tape: &mut Tape, params: &hypergrid::Bound| {
        let xv = tape.constant(x.clone());
        let cond = tape.select_row(xv, 0).unwrap();
        let h = tape.matmul(xv, params.var(w1)).unwrap();
        let bb = tape.broadcast_rows(params.var(b1), 4).unwrap();
        let h = tape.add(h, bb).unwrap();
        let h = tape.relu(h);
        let y = layer.forward_conditioned(tape, params, h, cond).unwrap();
        readout(tape, y, 7)
    };
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, true);
    let loss = loss_on(&mut tape, &params);
    tape.backward(loss).unwrap();
    let grads = params.grads(&tape);
    let loss_fn = |p: &ParamStore| -> hypergrid::Result<f64> {
        let mut tape = Tape::new();
        let params = p.bind(&mut tape, false);
        let l = loss_on(&mut tape, &params);
        Ok(tape.value(l).item())
    };
    let reports = hypergrid::gradcheck::check_blocks(&store, loss_fn, &grads, 1000, 0, 1e-5).unwrap();
    assert_eq!(reports.len(), 6);
    for rep in &reports {
        assert!(rep.pass, "{}", hypergrid::gradcheck::format_table(&reports));
        assert_eq!(rep.checked, store.get(store.id(&rep.block).unwrap()).len());
    }
}

fn ffn_branch_output(model: &TransformerModel, block: Block, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let cond = tape.select_row(xv, 0).unwrap();
    let y = model.ffn_branch(&mut tape, &params, block, xv, cond).unwrap();
    tape.value(y).clone()
}

fn zero_gate_params(model: &mut TransformerModel) {
    for id in model.gate_params() {
        let shape = model.params().get(id).shape().to_vec();
        model.params_mut().set(id, Tensor::zeros(&shape)).unwrap();
    }
}

fn ungated_twin(model: &TransformerModel) -> TransformerModel {
    let mut cfg = *model.config();
    cfg.gate.kind = GateKind::None;
    let mut plain = TransformerModel::new(cfg, 0).unwrap();
    for (id, name, _) in plain.params().iter().map(|(i, n, t)| (i, n.to_string(), t.clone())).collect::<Vec<_>>() {
        let v = model.params().get(model.params().id(&name).unwrap()).clone();
        plain.params_mut().set(id, v).unwrap();
    }
    plain
}

fn scaled_diff(a: &Tensor, b: &Tensor, factor: f64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - factor * y).abs()).fold(0.0, f64::max)
}

#[test]
fn forced_unit_gate_doubles_the_branch_and_zero_maps_give_one_and_a_half() {
    for variant in Variant::ALL {
        let kind = GateKind::HyperGrid { variant, d_r: 4, d_c: 2, n: None };
        let mut model = TransformerModel::new(small_model(kind), 5).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng(104));
        let plain = ungated_twin(&model);
        for block in [Block::Encoder(0), Block::Decoder(0)] {
            let base = ffn_branch_output(&plain, block, &x);
            model.set_gate_override(Some(1.0));
            assert!(scaled_diff(&ffn_branch_output(&model, block, &x), &base, 2.0) <= 1e-12);
            model.set_gate_override(None);
            let mut zeroed = model.clone();
            zero_gate_params(&mut zeroed);
            assert!(scaled_diff(&ffn_branch_output(&zeroed, block, &x), &base, 1.5) <= 1e-12);
        }
    }
}

#[test]
fn zero_outgate_halves_the_post_relu_branch() {
    for mode in [OutGateMode::Full, OutGateMode::Blocked(4)] {
        let mut model = TransformerModel::new(small_model(GateKind::OutGate(mode)), 6).unwrap();
        zero_gate_params(&mut model);
        let plain = ungated_twin(&model);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng(105));
        for block in [Block::Encoder(0), Block::Decoder(0)] {
            let got = ffn_branch_output(&model, block, &x);
            let base = ffn_branch_output(&plain, block, &x);
            // b2 is zero at init, so halving the hidden layer halves the branch.
            assert!(scaled_diff(&got, &base, 0.5) <= 1e-12, "{mode}");
        }
    }
}

#[test]
fn first_layer_gates_ignore_non_prefix_tokens() {
    let kinds = gate_configs(4, 2, 4);
    let mut r = rng(106);
    for kind in kinds.into_iter().filter(|k| *k != GateKind::None) {
        let model = TransformerModel::new(small_model(kind), 8).unwrap();
        for _ in 0..10 {
            use rand::Rng;
            let len = r.random_range(2..8);
            let mut tokens: Vec<usize> = (0..len).map(|_| r.random_range(vocab::DIGIT_BASE..vocab::DIGIT_BASE + 6)).collect();
            tokens[0] = vocab::PREFIX_BASE + r.random_range(0..5);
            let before = model.encoder_gates(&tokens).unwrap();
            let pos = r.random_range(1..len);
            tokens[pos] = vocab::DIGIT_BASE + (tokens[pos] - vocab::DIGIT_BASE + 1) % 6;
            let after = model.encoder_gates(&tokens).unwrap();
            assert_eq!(before[0], after[0], "{}", kind.label());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gates_lie_strictly_between_zero_and_one_and_are_block_constant(
        variant in prop::sample::select(Variant::ALL.to_vec()),
        seed in any::<u64>(),
    ) {
        let p = random_projection(variant, &mut rng(seed));
        let cond = Tensor::vector(p.x[0].clone());
        let g = p.layer.compute_gate(&p.store, &cond).unwrap();
        prop_assert!(g.grid.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (br, bc) = p.dims.block_shape(variant);
        let e = &g.expanded;
        prop_assert_eq!(e.shape(), &[p.dims.fan_in, p.dims.fan_out]);
        for i in 0..p.dims.fan_in {
            for j in 0..p.dims.fan_out {
                prop_assert_eq!(e.at(i, j), g.grid.at(i / br, j / bc));
            }
        }
    }
}
