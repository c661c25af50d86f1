//! JSON export of a partitioned dataset: features, labels and split tags.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, PartitionedDataset};
use crate::error::{MhdError, Result};
use crate::nn::Matrix;

const FORMAT_VERSION: u32 = 1;

/// Columnar form; `split[i]` is `"test"`, `"public"` or `"client:{i}"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetExport {
    pub version: u32,
    pub num_classes: usize,
    pub input_dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub split: Vec<String>,
    pub primary_labels: Vec<Vec<usize>>,
}

impl DatasetExport {
    pub fn from_partition(p: &PartitionedDataset) -> Self {
        let n = p.source.len();
        let mut split = vec![String::new(); n];
        p.test.iter().for_each(|&i| split[i] = "test".into());
        p.public.iter().for_each(|&i| split[i] = "public".into());
        for (c, shard) in p.private.iter().enumerate() {
            shard.iter().for_each(|&i| split[i] = format!("client:{c}"));
        }
        DatasetExport {
            version: FORMAT_VERSION,
            num_classes: p.source.num_classes,
            input_dim: p.source.features.cols(),
            features: p.source.features.as_slice().to_vec(),
            labels: p.source.labels.clone(),
            split,
            primary_labels: p.primary_labels.clone(),
        }
    }

    pub fn into_partition(self) -> Result<PartitionedDataset> {
        if self.version != FORMAT_VERSION {
            return Err(MhdError::Format(format!("unsupported export version {}", self.version)));
        }
        let n = self.labels.len();
        if self.split.len() != n {
            return Err(MhdError::Format("split column length differs from labels".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(MhdError::Format(format!("label {bad} >= {}", self.num_classes)));
        }
        let features =
            Matrix::from_vec(n, self.input_dim, self.features).map_err(|e| MhdError::Format(e.to_string()))?;
        let k = self.primary_labels.len();
        let (mut test, mut public, mut private) = (Vec::new(), Vec::new(), vec![Vec::new(); k]);
        for (i, tag) in self.split.iter().enumerate() {
            match tag.as_str() {
                "test" => test.push(i),
                "public" => public.push(i),
                other => {
                    let c = other
                        .strip_prefix("client:")
                        .and_then(|c| c.parse::<usize>().ok())
                        .filter(|&c| c < k)
                        .ok_or_else(|| MhdError::Format(format!("bad split tag `{other}`")))?;
                    private[c].push(i);
                }
            }
        }
        Ok(PartitionedDataset {
            source: LabeledSet { features, labels: self.labels, num_classes: self.num_classes },
            test,
            public,
            private,
            primary_labels: self.primary_labels,
        })
    }
}

pub fn export_json(p: &PartitionedDataset) -> Result<String> {
    Ok(serde_json::to_string(&DatasetExport::from_partition(p))?)
}

pub fn import_json(text: &str) -> Result<PartitionedDataset> {
    serde_json::from_str::<DatasetExport>(text)?.into_partition()
}
