//! Full parameterization of one experiment, with defaults and validation.
//! Every validation error names the dotted key of the offending field.

use serde::{Deserialize, Serialize};

use crate::data::{AssignmentMode, PartitionSpec, SyntheticDatasetSpec};
use crate::distill::DistillConfig;
use crate::error::{MhdError, Result};
use crate::federation::{TopologyKind, TopologySpec};
use crate::nn::Architecture;
use crate::rng::derive_config_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    /// Derived from the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            samples_per_class: 400,
            input_dim: 16,
            cluster_separation: 3.0,
            noise_sigma: 1.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub primary_labels_per_client: usize,
    pub assignment: AssignmentMode,
    pub skewness: f64,
    pub public_fraction: f64,
    pub test_fraction: f64,
    /// Derived from the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            num_clients: 4,
            primary_labels_per_client: 5,
            assignment: AssignmentMode::Even,
            skewness: 100.0,
            public_fraction: 0.1,
            test_fraction: 0.2,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Per-client hidden widths; empty means every client uses `hidden`.
    pub client_hidden: Vec<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], embedding_dim: 32, client_hidden: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub public_batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, momentum: 0.9, batch_size: 64, public_batch_size: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Mhd,
    Fedavg,
    Separate,
    PooledSupervised,
}

impl TrainingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::Mhd => "mhd",
            TrainingMode::Fedavg => "fedavg",
            TrainingMode::Separate => "separate",
            TrainingMode::PooledSupervised => "pooled_supervised",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    pub total_steps: usize,
    pub eval_interval: usize,
    /// Pool capacity; the number of clients when absent.
    pub pool_size: Option<usize>,
    pub pool_interval: usize,
    /// Separate optimizer steps for the local and distillation terms
    /// instead of one summed step.
    pub interleave: bool,
    pub fedavg_interval: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Mhd,
            total_steps: 5000,
            eval_interval: 500,
            pool_size: None,
            pool_interval: 10,
            interleave: false,
            fedavg_interval: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub write_checkpoints: bool,
    /// Fit linear probes on final embeddings (slow).
    pub embedding_probe: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { write_checkpoints: true, embedding_probe: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub topology: TopologySpec,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub output: OutputConfig,
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(MhdError::config(key, "must be positive"));
    }
    Ok(())
}

impl RunConfig {
    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        let d = &self.dataset;
        SyntheticDatasetSpec {
            num_classes: d.num_classes,
            samples_per_class: d.samples_per_class,
            input_dim: d.input_dim,
            cluster_separation: d.cluster_separation,
            noise_sigma: d.noise_sigma,
            seed: d.seed.unwrap_or_else(|| derive_config_seed(self.seed, "dataset")),
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let p = &self.partition;
        PartitionSpec {
            num_clients: p.num_clients,
            primary_labels_per_client: p.primary_labels_per_client,
            assignment_mode: p.assignment,
            skewness: p.skewness,
            public_fraction: p.public_fraction,
            test_fraction: p.test_fraction,
            seed: p.seed.unwrap_or_else(|| derive_config_seed(self.seed, "partition")),
        }
    }

    pub fn architecture(&self, client: usize) -> Architecture {
        let hidden = self.model.client_hidden.get(client).cloned().unwrap_or_else(|| self.model.hidden.clone());
        Architecture {
            input_dim: self.dataset.input_dim,
            hidden,
            embedding_dim: self.model.embedding_dim,
            num_classes: self.dataset.num_classes,
            num_aux_heads: self.distill.num_aux_heads,
        }
    }

    pub fn pool_size(&self) -> usize {
        self.training.pool_size.unwrap_or(self.partition.num_clients)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.partition_spec().validate(self.dataset.num_classes)?;
        let k = self.partition.num_clients;

        positive("model.embedding_dim", self.model.embedding_dim)?;
        if self.model.hidden.contains(&0) {
            return Err(MhdError::config("model.hidden", "widths must be positive"));
        }
        if !self.model.client_hidden.is_empty() {
            if self.model.client_hidden.len() != k {
                return Err(MhdError::config(
                    "model.client_hidden",
                    format!("needs one entry per client ({k}), got {}", self.model.client_hidden.len()),
                ));
            }
            if self.model.client_hidden.iter().flatten().any(|&w| w == 0) {
                return Err(MhdError::config("model.client_hidden", "widths must be positive"));
            }
        }

        self.distill.validate()?;
        if self.distill.delta > self.pool_size() {
            return Err(MhdError::config("distill.delta", format!("exceeds the pool size {}", self.pool_size())));
        }
        if self.distill.top_k > self.dataset.num_classes {
            return Err(MhdError::config("distill.top_k", "exceeds the number of classes"));
        }
        self.topology.validate(k)?;

        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(MhdError::config("optimizer.learning_rate", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(MhdError::config("optimizer.momentum", "must be in [0, 1)"));
        }
        positive("optimizer.batch_size", o.batch_size)?;
        positive("optimizer.public_batch_size", o.public_batch_size)?;

        let t = &self.training;
        positive("training.total_steps", t.total_steps)?;
        positive("training.eval_interval", t.eval_interval)?;
        positive("training.pool_interval", t.pool_interval)?;
        positive("training.fedavg_interval", t.fedavg_interval)?;
        if t.pool_size == Some(0) {
            return Err(MhdError::config("training.pool_size", "must be positive"));
        }
        if t.mode == TrainingMode::Fedavg {
            let first = self.architecture(0);
            if (1..k).any(|i| self.architecture(i) != first) {
                return Err(MhdError::config(
                    "model.client_hidden",
                    "fedavg needs identical architectures on every client",
                ));
            }
        }
        if self.topology.kind == TopologyKind::Custom && self.topology.edges.is_empty() && t.mode == TrainingMode::Mhd {
            return Err(MhdError::config("topology.edges", "custom topology needs at least one edge"));
        }
        Ok(())
    }

    /// Copy with every derived seed made explicit, so the result reproduces
    /// the run on its own.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.dataset.seed = Some(self.dataset_spec().seed);
        c.partition.seed = Some(self.partition_spec().seed);
        c.training.pool_size = Some(self.pool_size());
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn errors_name_keys() {
        let key_of = |c: RunConfig| match c.validate() {
            Err(MhdError::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        let mut c = RunConfig::default();
        c.optimizer.momentum = 1.5;
        assert_eq!(key_of(c), "optimizer.momentum");
        let mut c = RunConfig::default();
        c.distill.delta = 9;
        assert_eq!(key_of(c), "distill.delta");
        let mut c = RunConfig::default();
        c.partition.primary_labels_per_client = 3;
        assert_eq!(key_of(c), "partition.primary_labels_per_client");
        let mut c = RunConfig::default();
        c.training.mode = TrainingMode::Fedavg;
        c.model.client_hidden = vec![vec![8], vec![8], vec![8], vec![16]];
        assert_eq!(key_of(c), "model.client_hidden");
    }

    #[test]
    fn resolved_config_is_a_fixed_point() {
        let c = RunConfig { seed: 42, ..Default::default() };
        let r = c.resolved();
        assert_eq!(r.dataset_spec(), c.dataset_spec());
        assert_eq!(r.partition_spec(), c.partition_spec());
        assert_eq!(r.resolved(), r);
    }
}
