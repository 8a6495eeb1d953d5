//! Fixtures shared by the benchmarks.

use hypergrid::tasks::Example;
use hypergrid::{
    builtin_tasks, GateConfig, GateKind, HyperGridLayer, ModelConfig, OutGateMode, ParamStore, ProjectionDims,
    TaskMixture, Tensor, TransformerModel, Variant,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A standalone gated projection with a random `rows×fan_in` input.
pub struct ProjectionFixture {
    pub store: ParamStore,
    pub layer: HyperGridLayer,
    pub input: Tensor,
}

pub fn projection(variant: Variant, rows: usize, fan_in: usize, fan_out: usize, d_r: usize, d_c: usize) -> ProjectionFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let dims = ProjectionDims::new(fan_in, fan_out, d_r, d_c).expect("bench dims");
    let layer = HyperGridLayer::new(&mut store, "proj", "gate", variant, dims, &mut rng).expect("bench layer");
    let input = Tensor::randn(&[rows, fan_in], 1.0, &mut rng);
    ProjectionFixture { store, layer, input }
}

/// The desk-size gate configurations timed by the training benchmark.
pub fn desk_gates() -> Vec<GateKind> {
    vec![
        GateKind::None,
        GateKind::HyperGrid {
            variant: Variant::LG,
            d_r: 4,
            d_c: 8,
            n: None,
        },
        GateKind::HyperGrid {
            variant: Variant::L2,
            d_r: 4,
            d_c: 8,
            n: None,
        },
        GateKind::OutGate(OutGateMode::Full),
    ]
}

pub fn desk_model(kind: GateKind) -> TransformerModel {
    TransformerModel::new(ModelConfig::desk(GateConfig::both(kind)), 0).expect("desk model")
}

pub fn desk_batch(size: usize) -> Vec<Example> {
    let mixture = TaskMixture::new(builtin_tasks(0)).expect("mixture");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    mixture.sample_batch(size, &mut rng).expect("batch")
}
