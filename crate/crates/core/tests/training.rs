//! Training loop behavior on small models.

mod common;

use std::fs;

use common::*;
use hypergrid::harness::{self, evaluate_examples, TrainConfig, METRICS_FILE};
use hypergrid::tasks::{tasks_with_sizes, vocab};
use hypergrid::{
    builtin_tasks, checkpoint, evaluate, AdamConfig, Error, GateKind, Seq2Seq, TaskMixture, TaskShape, Tensor,
    TransformerModel, Variant,
};

fn lg() -> GateKind {
    GateKind::HyperGrid {
        variant: Variant::LG,
        d_r: 4,
        d_c: 2,
        n: None,
    }
}

fn small_mixture() -> TaskMixture {
    let shape = TaskShape {
        min_len: 2,
        max_len: 3,
        symbols: 4,
    };
    TaskMixture::new(tasks_with_sizes(5, &[60, 40, 30, 20, 20], 12, shape).unwrap()).unwrap()
}

#[test]
fn overfits_a_fixed_batch() {
    for kind in [GateKind::None, lg()] {
        let mut model = TransformerModel::new(small_model(kind), 1).unwrap();
        let config = TrainConfig {
            steps: 500,
            batch_size: 4,
            eval_every: 500,
            grad_chunk: 4,
            overfit: true,
            optimizer: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        };
        let out = harness::train(&mut model, &small_mixture(), &config, 2, None).unwrap();
        assert!(out.final_loss < 0.01, "{}: final loss {}", kind.label(), out.final_loss);
    }
}

fn run_once(dir: &std::path::Path, threads: usize) -> (Vec<u8>, harness::TrainOutcome) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let config = TrainConfig {
        steps: 30,
        batch_size: 6,
        eval_every: 10,
        grad_chunk: 2,
        ..TrainConfig::default()
    };
    let outcome = pool.install(|| {
        let mut model = TransformerModel::new(small_model(lg()), 3).unwrap();
        harness::train(&mut model, &small_mixture(), &config, 4, Some(dir)).unwrap()
    });
    (fs::read(dir.join(METRICS_FILE)).unwrap(), outcome)
}

#[test]
fn identical_runs_write_identical_metrics_regardless_of_threads() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, oa) = run_once(a.path(), 1);
    let (mb, _) = run_once(b.path(), 1);
    let (mc, _) = run_once(c.path(), 3);
    assert_eq!(ma, mb);
    assert_eq!(ma, mc);
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 3);
    assert!(!String::from_utf8_lossy(&fs::read(a.path().join(METRICS_FILE)).unwrap()).contains("wall"));
    assert_eq!(fs::read_to_string(a.path().join(harness::TIMING_FILE)).unwrap().lines().count(), 3);
    assert_eq!(oa.history.len(), 3);
}

#[test]
fn best_checkpoint_reproduces_the_best_score() {
    let dir = tempfile::tempdir().unwrap();
    let (_, outcome) = run_once(dir.path(), 1);
    let best = outcome.history.iter().map(|m| m.macro_avg).fold(f64::MIN, f64::max);
    assert_eq!(outcome.best_macro_avg, best);
    let first_best = outcome.history.iter().find(|m| m.macro_avg == best).unwrap().step;
    assert_eq!(outcome.best_step, first_best);

    let mut model = TransformerModel::new(small_model(lg()), 99).unwrap();
    checkpoint::load_into(model.params_mut(), outcome.best_checkpoint.as_ref().unwrap()).unwrap();
    let mixture = small_mixture();
    let scores: Vec<f64> = mixture.tasks().iter().map(|t| evaluate(&model, t).unwrap()).collect();
    assert_eq!(harness::macro_average(&scores), best);
    let report = harness::report("run", &outcome);
    for t in mixture.tasks() {
        assert!(report.contains(&t.name));
    }
}

/// Predicts EVEN or ODD from a hash of the input, unrelated to its parity.
struct Coin;

impl Seq2Seq for Coin {
    fn greedy_decode(&self, input: &[usize], _: usize) -> hypergrid::Result<Vec<usize>> {
        let h = input.iter().fold(0xcbf29ce484222325u64, |h, &t| (h ^ t as u64).wrapping_mul(0x100000001b3));
        Ok(vec![if (h >> 17) & 1 == 0 { vocab::EVEN } else { vocab::ODD }])
    }
}

#[test]
fn random_parity_guesses_score_about_half() {
    let parity = &builtin_tasks(0)[3];
    assert_eq!(parity.kind, hypergrid::TaskKind::Parity);
    let acc = evaluate_examples(&Coin, &parity.train_set()[..1000], 2).unwrap();
    // 3σ of a fair binomial over 1000 examples.
    assert!((acc - 0.5).abs() < 3.0 * (0.25f64 / 1000.0).sqrt(), "{acc}");
}

#[test]
fn non_finite_parameters_stop_training() {
    let mut model = TransformerModel::new(small_model(lg()), 3).unwrap();
    let id = model.output_projection();
    let shape = model.params().get(id).shape().to_vec();
    model.params_mut().set(id, Tensor::filled(&shape, f64::NAN)).unwrap();
    let config = TrainConfig {
        steps: 3,
        batch_size: 2,
        eval_every: 1,
        ..TrainConfig::default()
    };
    let err = harness::train(&mut model, &small_mixture(), &config, 0, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 1, .. }), "{err}");
}

#[test]
fn chunked_gradients_match_the_single_tape() {
    let model = TransformerModel::new(small_model(lg()), 3).unwrap();
    let batch = small_mixture().sample_batch(5, &mut rng(8)).unwrap();
    let whole = model.batch_gradients(&batch).unwrap();
    for chunk in [1, 2, 5] {
        let parts = model.batch_gradients_chunked(&batch, chunk).unwrap();
        assert_eq!(parts.tokens, whole.tokens);
        assert!((parts.loss - whole.loss).abs() < 1e-12);
        for (a, b) in parts.grads.iter().flatten().zip(whole.grads.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!((model.batch_loss(&batch).unwrap() - whole.loss).abs() < 1e-12);
}
