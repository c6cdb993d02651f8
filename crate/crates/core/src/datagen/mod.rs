//! Synthetic multimodal datasets and ingestion of small tabular/text files.

mod figure3;
mod ingest;
mod synthetic;

pub use figure3::{gen_figure3_scenario, Figure3Scenario, ProbePoint, FIGURE3_MAX_ATTEMPTS};
pub use ingest::{export_csv, ingest_tabular_text, FileFormat, Schema};
pub use synthetic::{gen_complementary, gen_complementary_split, gen_perfect_correlation, ComplementaryParams};

use crate::batch::{ModalityData, MultimodalBatch};
use crate::error::{Error, Result};
use crate::fusionnet::ModalitySpec;

/// Encoder output width given to generated modality specs.
pub const DEFAULT_FEATURE_DIM: usize = 16;

/// One example's raw values.
#[derive(Clone, Debug, PartialEq)]
pub enum ExampleValue {
    Continuous(Vec<f64>),
    Tokens(Vec<usize>),
    Categorical(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalExample {
    pub values: Vec<ExampleValue>,
    pub label: usize,
}

/// A dataset with its modality specs and disjoint train/val/test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    pub specs: Vec<ModalitySpec>,
    pub num_classes: usize,
    pub data: MultimodalBatch,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    /// Human-readable generation parameters.
    pub description: String,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn example(&self, i: usize) -> MultimodalExample {
        let values = self
            .data
            .modalities
            .iter()
            .map(|m| match m {
                ModalityData::Continuous(t) => ExampleValue::Continuous(t.row(i).to_vec()),
                ModalityData::Tokens(s) => ExampleValue::Tokens(s[i].clone()),
                ModalityData::Categorical(s) => ExampleValue::Categorical(s[i].clone()),
            })
            .collect();
        MultimodalExample {
            values,
            label: self.data.labels[i],
        }
    }

    pub fn train_batch(&self) -> MultimodalBatch {
        self.data.select(&self.train)
    }

    pub fn val_batch(&self) -> MultimodalBatch {
        self.data.select(&self.val)
    }

    pub fn test_batch(&self) -> MultimodalBatch {
        self.data.select(&self.test)
    }

    /// Sets every modality's encoder output width.
    pub fn with_feature_dim(mut self, dim: usize) -> Self {
        for s in &mut self.specs {
            s.feature_dim = dim;
        }
        self
    }

    /// Checks the split and label invariants.
    pub fn validate(&self) -> Result<()> {
        self.data.validate(&self.specs)?;
        let mut seen = vec![false; self.len()];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= self.len() || seen[i] {
                return Err(Error::contract(format!("split index {i} is out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("splits do not cover every example"));
        }
        if let Some(&l) = self.data.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Index {
                op: "label",
                index: l,
                bound: self.num_classes,
            });
        }
        Ok(())
    }
}

/// Split sizes for an 80/10/10 split with rounded counts.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.8 * n as f64).round() as usize;
    let val = ((0.1 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Contiguous splits over `0..n`.
pub(crate) fn contiguous_splits(train: usize, val: usize, test: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    (
        (0..train).collect(),
        (train..train + val).collect(),
        (train + val..train + val + test).collect(),
    )
}
