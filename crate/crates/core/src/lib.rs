//! HyperGrid: grid-wise hypernetwork gating for transformer feed-forward
//! projections, together with the small autodiff engine, training harness,
//! gradient checker and grid-size sweep used to study it.

pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod hypergrid;
pub mod optim;
pub mod outgate;
pub mod params;
pub mod sweep;
pub mod tasks;
pub mod tensor;
pub mod transformer;

pub use audit::{param_audit, Audit};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use gradcheck::{check_model, CheckReport};
pub use harness::{evaluate, train, RunMetrics, TrainConfig, TrainOutcome};
pub use hypergrid::{param_cost, pool_prefix, stated_param_cost, GateGrid, HyperGridLayer, ProjectionDims, Variant};
pub use optim::{Adam, AdamConfig};
pub use outgate::{OutGateLayer, OutGateMode};
pub use params::{Bound, ParamId, ParamStore};
pub use sweep::{run_sweep, SweepPlan, SweepResult};
pub use tasks::{builtin_tasks, vocab, Example, TaskKind, TaskMixture, TaskShape, TaskSpec};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub use transformer::{Block, GateConfig, GateKind, ModelConfig, Seq2Seq, TransformerModel};
