//! Datasets, the labeled/unlabeled split, and client partitioning.
//!
//! Training code only ever sees [`LabeledExample`] and [`UnlabeledExample`];
//! the true classes of unlabeled samples live in [`GroundTruth`], which is
//! consulted for metrics and nothing else.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

mod partition;
pub mod sfds;
mod synth;

pub use partition::{
    distribute, largest_remainder, partition, split_labeled, LabeledSplit, Partition, PartitionMode, PartitionSpec,
};
pub use sfds::{convert_cifar10, load_dataset, save_dataset};
pub use synth::make_synthetic_blobs;

/// One sample as stored on disk or generated.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub features: Vec<f32>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Per-sample shape: `[c, h, w]` for images, `[d]` for vectors.
    pub sample_shape: Vec<usize>,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn is_image(&self) -> bool {
        self.sample_shape.len() == 3
    }

    /// Count of labeled examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for e in &self.examples {
            if let Some(y) = e.label {
                counts[y] += 1;
            }
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub id: u64,
    pub features: Vec<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledExample {
    pub id: u64,
    pub features: Vec<f32>,
}

/// Local data of one client: `D_l^k` and `D_u^k`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<UnlabeledExample>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labeled_class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for e in &self.labeled {
            counts[e.label] += 1;
        }
        counts
    }
}

/// Hidden true classes of samples that training sees as unlabeled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    labels: BTreeMap<u64, usize>,
}

impl GroundTruth {
    pub(crate) fn insert(&mut self, id: u64, label: usize) {
        self.labels.insert(id, label);
    }

    pub fn label_of(&self, id: u64) -> Option<usize> {
        self.labels.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of `(id, assigned label)` pairs whose assigned label matches
    /// the hidden one. `None` when nothing was assigned or no assigned
    /// sample has a known true label.
    pub fn precision(&self, assigned: &[(u64, usize)]) -> Option<f64> {
        let known: Vec<bool> = assigned
            .iter()
            .filter_map(|&(id, y)| self.label_of(id).map(|t| t == y))
            .collect();
        if known.is_empty() {
            return None;
        }
        Some(known.iter().filter(|&&ok| ok).count() as f64 / known.len() as f64)
    }
}
