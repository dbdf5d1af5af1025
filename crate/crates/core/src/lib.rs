//! Streaming linear learners over sharded features: single-node and delayed
//! gradient descent, trees of learners trained locally or from the root's
//! prediction, a deterministic multinode scheduler, and closed-form oracles.

pub mod delay;
pub mod error;
pub mod global;
pub mod hash;
pub mod ingest;
pub mod learner;
pub mod local;
pub mod loss;
pub mod oracle;
pub mod sched;
pub mod sparse;
pub mod topology;

pub use error::{Error, Result};
pub use ingest::{expand_and_hash, parse_instance, Instance, InteractionSpec};
pub use global::{GlobalRule, RuleKind};
pub use learner::{learning_rate, train_sequential, Example, Metrics, ScheduleSpec};
pub use local::{NodeSchedules, TreeLearner};
pub use loss::LossSpec;
pub use sched::{run_simulation, SimConfig};
pub use sparse::{dot, SparseVector, WeightModel};
pub use topology::{NodeId, ShardPlan, Topology};
