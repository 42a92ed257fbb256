//! Federated learning simulation with similarity-weighted aggregation.
//!
//! The crate covers the whole round loop: non-IID synthetic shards
//! ([`partition`]), sliding-window collaborator selection ([`selection`]),
//! local SGD on small classifiers ([`model`], [`collaborator`]), server-side
//! fusion ([`aggregation`]) over named-tensor parameter sets ([`params`]),
//! and the experiment driver with checkpoints and reports ([`engine`],
//! [`metrics`]).

pub mod aggregation;
pub mod collaborator;
pub mod engine;
pub mod error;
pub mod hexfloat;
pub mod metrics;
pub mod model;
pub mod params;
pub mod partition;
pub mod rng;
pub mod selection;

pub use aggregation::{
    aggregate, AggregationConfig, AggregationWeights, CollaboratorUpdate, Strategy,
};
pub use collaborator::{evaluate, local_train, EvalMetrics, LocalTrainConfig};
pub use engine::{
    resume, run_experiment, Experiment, ExperimentConfig, ExperimentResult, RoundRecord,
};
pub use error::{Error, Result};
pub use metrics::{
    communication_cost, convergence_stat, export_report, ConvergenceStat, ReportFormat,
};
pub use model::{ModelFamily, TaskSpec};
pub use params::{Norm, ParameterSet, Scope, TensorEntry};
pub use partition::{
    make_partition, materialize_shard, Dataset, PartitionConfig, ShardSpec, TaskGenerator,
};
pub use selection::{RoundPlan, SchedulerConfig, SchedulerState};
