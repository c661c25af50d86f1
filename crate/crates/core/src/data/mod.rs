//! Synthetic data generation and client partitioning.

mod export;
mod partition;
mod synthetic;

pub use export::{export_json, import_json, DatasetExport};
pub use partition::{
    assign_primary_labels, build_shared_test, client_weights, distribute_samples, partition, primary_client_counts,
    primary_count_histogram, AssignmentMode, Distribution, PartitionSpec, PartitionedDataset,
};
pub use synthetic::{generate_dataset, LabeledSet, SyntheticDatasetSpec};
