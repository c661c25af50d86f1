//! Primary-label assignment and skew-weighted distribution of samples
//! across clients, plus the public and shared-test splits.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{MhdError, Result};
use crate::nn::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// Every label has the same number of primary clients.
    Even,
    /// Every client draws a uniformly random fixed-size label subset.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub primary_labels_per_client: usize,
    pub assignment_mode: AssignmentMode,
    /// A sample is `1 + skewness` times likelier to land on a client for
    /// which its label is primary.
    pub skewness: f64,
    pub public_fraction: f64,
    /// Per-class fraction carved out as the shared test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(MhdError::config("partition.num_clients", "must be positive"));
        }
        if self.primary_labels_per_client == 0 || self.primary_labels_per_client > num_classes {
            return Err(MhdError::config(
                "partition.primary_labels_per_client",
                format!("must be in 1..={num_classes}"),
            ));
        }
        if self.assignment_mode == AssignmentMode::Even
            && !(self.num_clients * self.primary_labels_per_client).is_multiple_of(num_classes)
        {
            return Err(MhdError::config(
                "partition.primary_labels_per_client",
                format!(
                    "even assignment needs num_clients * primary_labels_per_client ({}) divisible by {num_classes} classes",
                    self.num_clients * self.primary_labels_per_client
                ),
            ));
        }
        if !(self.skewness >= 0.0 && self.skewness.is_finite()) {
            return Err(MhdError::config("partition.skewness", "must be finite and >= 0"));
        }
        if !(self.public_fraction > 0.0 && self.public_fraction < 1.0) {
            return Err(MhdError::config("partition.public_fraction", "must be in (0, 1)"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(MhdError::config("partition.test_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Primary label sets `L_i`, each sorted ascending.
pub fn assign_primary_labels(spec: &PartitionSpec, num_classes: usize) -> Result<Vec<Vec<usize>>> {
    spec.validate(num_classes)?;
    let k = spec.num_clients;
    let c = spec.primary_labels_per_client;
    let mut rng = rng::stream(spec.seed, "partition.primary", 0);
    let sets = match spec.assignment_mode {
        AssignmentMode::Even => {
            // Client i takes c consecutive positions of a shuffled label
            // cycle; K·c positions wrap the cycle exactly K·c/d times.
            let mut perm: Vec<usize> = (0..num_classes).collect();
            perm.shuffle(&mut rng);
            (0..k)
                .map(|i| {
                    let mut s: Vec<usize> = (0..c).map(|j| perm[(i * c + j) % num_classes]).collect();
                    s.sort_unstable();
                    s
                })
                .collect()
        }
        AssignmentMode::Random => (0..k)
            .map(|_| {
                let mut s = sample(&mut rng, num_classes, c).into_vec();
                s.sort_unstable();
                s
            })
            .collect(),
    };
    Ok(sets)
}

/// Number of primary clients of every label.
pub fn primary_client_counts(assignment: &[Vec<usize>], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for set in assignment {
        for &l in set {
            counts[l] += 1;
        }
    }
    counts
}

/// Histogram of primary-client counts; the last bucket collects
/// `count >= max_bucket`.
pub fn primary_count_histogram(assignment: &[Vec<usize>], num_classes: usize, max_bucket: usize) -> Vec<usize> {
    let mut hist = vec![0; max_bucket + 1];
    for c in primary_client_counts(assignment, num_classes) {
        hist[c.min(max_bucket)] += 1;
    }
    hist
}

/// Per-client sampling weights for a sample of `label`: `1 + s` for primary
/// clients, `1` otherwise.
pub fn client_weights(assignment: &[Vec<usize>], label: usize, skewness: f64) -> Vec<f64> {
    assignment.iter().map(|set| if set.binary_search(&label).is_ok() { 1.0 + skewness } else { 1.0 }).collect()
}

fn draw_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Stratified holdout: the same number of samples from every class,
/// `floor(min class count · fraction)`.
pub fn build_shared_test(labels: &[usize], num_classes: usize, holdout_fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(MhdError::Input(format!("label {y} >= {num_classes}")));
        }
        by_class[y].push(i);
    }
    let min_count = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let per_class = (min_count as f64 * holdout_fraction + 1e-9).floor() as usize;
    if per_class == 0 || per_class >= min_count {
        return Err(MhdError::config(
            "partition.test_fraction",
            format!(
                "smallest class has {min_count} samples; a {holdout_fraction} holdout leaves {per_class} per class"
            ),
        ));
    }
    let mut rng = rng::stream(seed, "partition.test", 0);
    let mut test = Vec::with_capacity(per_class * num_classes);
    for members in &by_class {
        test.extend(sample(&mut rng, members.len(), per_class).into_iter().map(|j| members[j]));
    }
    test.sort_unstable();
    Ok(test)
}

/// Result of [`distribute_samples`].
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub public: Vec<usize>,
    pub private: Vec<Vec<usize>>,
}

/// Draws the public split uniformly from `available`, then sends each
/// remaining sample to one client by an independent categorical draw with
/// the `(1 + s)` weights.
pub fn distribute_samples(
    labels: &[usize],
    available: &[usize],
    assignment: &[Vec<usize>],
    spec: &PartitionSpec,
) -> Result<Distribution> {
    if assignment.len() != spec.num_clients {
        return Err(MhdError::Input(format!(
            "assignment covers {} clients, spec has {}",
            assignment.len(),
            spec.num_clients
        )));
    }
    let n_pub = (available.len() as f64 * spec.public_fraction).round() as usize;
    let mut pub_rng = rng::stream(spec.seed, "partition.public", 0);
    let mut public: Vec<usize> =
        sample(&mut pub_rng, available.len(), n_pub).into_iter().map(|j| available[j]).collect();
    public.sort_unstable();

    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let weights: Vec<Vec<f64>> = (0..num_classes).map(|l| client_weights(assignment, l, spec.skewness)).collect();
    let mut assign_rng = rng::stream(spec.seed, "partition.assign", 0);
    let mut private = vec![Vec::new(); spec.num_clients];
    let mut is_public = vec![false; labels.len()];
    public.iter().for_each(|&i| is_public[i] = true);
    for &i in available {
        if is_public[i] {
            continue;
        }
        let client = draw_categorical(&weights[labels[i]], &mut assign_rng);
        private[client].push(i);
    }
    Ok(Distribution { public, private })
}

/// Source table split into shared test, public and per-client private parts.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDataset {
    pub source: LabeledSet,
    pub test: Vec<usize>,
    pub public: Vec<usize>,
    pub private: Vec<Vec<usize>>,
    pub primary_labels: Vec<Vec<usize>>,
}

impl PartitionedDataset {
    pub fn num_clients(&self) -> usize {
        self.private.len()
    }

    pub fn num_classes(&self) -> usize {
        self.source.num_classes
    }

    pub fn shared_test(&self) -> LabeledSet {
        self.source.subset(&self.test)
    }

    /// Public samples, features only.
    pub fn public_features(&self) -> Matrix {
        self.source.features.select_rows(&self.public)
    }

    pub fn client_shard(&self, client: usize) -> LabeledSet {
        self.source.subset(&self.private[client])
    }

    /// Every private shard pooled together.
    pub fn pooled_private(&self) -> LabeledSet {
        let all: Vec<usize> = self.private.concat();
        self.source.subset(&all)
    }

    /// Label distribution of a client's private shard.
    pub fn label_marginal(&self, client: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.num_classes()];
        let shard = &self.private[client];
        for &i in shard {
            m[self.source.labels[i]] += 1.0;
        }
        let n = shard.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// Full pipeline: shared test, then primary labels, public split and
/// private distribution.
pub fn partition(source: LabeledSet, spec: &PartitionSpec) -> Result<PartitionedDataset> {
    spec.validate(source.num_classes)?;
    let test = build_shared_test(&source.labels, source.num_classes, spec.test_fraction, spec.seed)?;
    let mut in_test = vec![false; source.len()];
    test.iter().for_each(|&i| in_test[i] = true);
    let available: Vec<usize> = (0..source.len()).filter(|&i| !in_test[i]).collect();
    let primary_labels = assign_primary_labels(spec, source.num_classes)?;
    let dist = distribute_samples(&source.labels, &available, &primary_labels, spec)?;
    Ok(PartitionedDataset { source, test, public: dist.public, private: dist.private, primary_labels })
}
