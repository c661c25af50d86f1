//! Gaussian-cluster classification data.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MhdError, Result};
use crate::nn::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Norm of every class mean.
    pub cluster_separation: f64,
    /// Per-coordinate standard deviation around the class mean.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MhdError::config("dataset.num_classes", "must be at least 2"));
        }
        if self.samples_per_class < 2 {
            return Err(MhdError::config("dataset.samples_per_class", "must be at least 2"));
        }
        if self.input_dim == 0 {
            return Err(MhdError::config("dataset.input_dim", "must be positive"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(MhdError::config("dataset.noise_sigma", "must be positive and finite"));
        }
        if !(self.cluster_separation >= 0.0 && self.cluster_separation.is_finite()) {
            return Err(MhdError::config("dataset.cluster_separation", "must be non-negative and finite"));
        }
        Ok(())
    }
}

/// Feature rows with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Class means of norm `cluster_separation` in random directions; samples
/// are the mean plus isotropic Gaussian noise. Rows are class-major.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<LabeledSet> {
    spec.validate()?;
    let mut mean_rng = rng::stream(spec.seed, "dataset.means", 0);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..spec.input_dim).map(|_| StandardNormal.sample(&mut mean_rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter().map(|v| v / norm * spec.cluster_separation).collect()
        })
        .collect();

    let n = spec.num_classes * spec.samples_per_class;
    let mut noise_rng = rng::stream(spec.seed, "dataset.noise", 0);
    let mut data = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                data.push(m + spec.noise_sigma * z);
            }
            labels.push(class);
        }
    }
    Ok(LabeledSet { features: Matrix::from_vec(n, spec.input_dim, data)?, labels, num_classes: spec.num_classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            num_classes: 3,
            samples_per_class: 20,
            input_dim: 4,
            cluster_separation: 3.0,
            noise_sigma: 1.0,
            seed: 11,
        }
    }

    #[test]
    fn same_seed_same_table() {
        assert_eq!(generate_dataset(&spec()).unwrap(), generate_dataset(&spec()).unwrap());
        let other = SyntheticDatasetSpec { seed: 12, ..spec() };
        assert_ne!(generate_dataset(&spec()).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn tiny_noise_collapses_to_class_means() {
        let s = SyntheticDatasetSpec { noise_sigma: 1e-12, ..spec() };
        let t = generate_dataset(&s).unwrap();
        for c in 0..3 {
            let rows: Vec<&[f64]> = (0..t.len()).filter(|&i| t.labels[i] == c).map(|i| t.features.row(i)).collect();
            for r in &rows {
                for (a, b) in r.iter().zip(rows[0]) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
            let norm = rows[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn labels_are_balanced() {
        let t = generate_dataset(&spec()).unwrap();
        assert_eq!(t.class_counts(), vec![20, 20, 20]);
    }

    #[test]
    fn invalid_specs_name_the_key() {
        let bad = SyntheticDatasetSpec { noise_sigma: 0.0, ..spec() };
        match generate_dataset(&bad) {
            Err(MhdError::Config { key, .. }) => assert_eq!(key, "dataset.noise_sigma"),
            other => panic!("{other:?}"),
        }
    }
}
