//! Decentralized training: topologies, checkpoint pools, the per-step
//! protocol, and the FedAvg, separate and pooled baselines.

pub mod comm;
mod fedavg;
mod pool;
mod runner;
mod topology;

pub use comm::CommReport;
pub use fedavg::fedavg_round;
pub use pool::{CheckpointPool, PoolEntry};
pub use runner::{
    build_dataset, evaluation_records, run_experiment, run_on_dataset, run_on_dataset_with, train_step, ClientState,
    RunOptions, RunOutput, StepInputs,
};
pub use topology::{Graph, TopologyKind, TopologySpec};
