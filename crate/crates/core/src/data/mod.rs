//! Datasets, partitioning, and trigger injection.
//!
//! All inputs live in raw `[0, 1]` space; any normalization the model applies
//! happens inside the model pipeline, strictly after trigger injection.

mod idx;
mod partition;
mod synthetic;
mod trigger;

pub use idx::load_mnist_idx;
pub use partition::{partition_dirichlet, partition_uniform};
pub use synthetic::{gen_synthetic, gen_synthetic_ood};
pub use trigger::{
    apply_trigger, make_fragments, poison_batch, rect_patch, PatchPixel, TriggerKind, TriggerSpec,
};

use ndarray::{Array2, ArrayView1};
use thiserror::Error;

/// Errors across dataset loading, generation, partitioning, and triggers.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {got:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        got: u32,
        expected: u32,
    },
    #[error("{path}: truncated file, expected {expected} bytes but found {got}")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("label {label} out of range for {n_classes} classes")]
    BadLabel { label: usize, n_classes: usize },
    #[error("input value {value} at sample {sample} outside [0, 1]")]
    ValueOutOfRange { sample: usize, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dirichlet alpha must be > 0, got {0}")]
    AlphaNonPositive(f64),
    #[error("cannot give every client a sample: {clients} clients but only {samples} samples")]
    TooFewSamples { clients: usize, samples: usize },
    #[error(
        "patch pixel (row {row}, col {col}, channel {channel}) outside image shape \
         {rows}x{cols}x{channels}"
    )]
    PatchOutOfBounds {
        row: usize,
        col: usize,
        channel: usize,
        rows: usize,
        cols: usize,
        channels: usize,
    },
    #[error("patch value {0} outside [0, 1]")]
    PatchValueOutOfRange(f64),
    #[error(
        "trigger with {pixels} pixels cannot be split into {requested} equal fragments; \
         divisible fragment counts: {divisors:?}"
    )]
    FragmentIndivisible {
        pixels: usize,
        requested: usize,
        divisors: Vec<usize>,
    },
    #[error("poison count {count} exceeds batch size {batch}")]
    PoisonCountExceedsBatch { count: usize, batch: usize },
    #[error("edge-case trigger requires a non-empty auxiliary pool")]
    EmptyEdgePool,
    #[error("trigger kind {0} requires a pixel patch")]
    MissingPatch(&'static str),
    #[error("partition does not cover the dataset exactly: {0}")]
    BadPartition(String),
}

/// A dataset of flat feature vectors in raw `[0, 1]` space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    image_shape: Option<(usize, usize, usize)>,
}

impl Dataset {
    /// Builds a dataset, validating label range, value range, and that any
    /// image shape matches the feature width.
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        image_shape: Option<(usize, usize, usize)>,
    ) -> Result<Self, DataError> {
        if inputs.nrows() == 0 {
            return Err(DataError::EmptyDataset);
        }
        if inputs.nrows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: inputs.nrows(),
                labels: labels.len(),
            });
        }
        if let Some((r, c, ch)) = image_shape {
            if r * c * ch != inputs.ncols() {
                return Err(DataError::InvalidArgument(format!(
                    "image shape {r}x{c}x{ch} does not match {} features",
                    inputs.ncols()
                )));
            }
        }
        for (i, &label) in labels.iter().enumerate() {
            if label >= n_classes {
                return Err(DataError::BadLabel {
                    label,
                    n_classes,
                });
            }
            let row = inputs.row(i);
            for &v in row.iter() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(DataError::ValueOutOfRange { sample: i, value: v });
                }
            }
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
            image_shape,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.image_shape
    }

    pub fn input_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    /// Copies the given rows into a dense batch `(inputs, labels)`.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let mut xs = Array2::zeros((indices.len(), self.n_features()));
        let mut ys = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            xs.row_mut(row).assign(&self.inputs.row(idx));
            ys.push(self.labels[idx]);
        }
        (xs, ys)
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Assignment of dataset sample indices to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMap {
    assignments: Vec<Vec<usize>>,
    alpha: Option<f64>,
}

impl PartitionMap {
    pub fn new(assignments: Vec<Vec<usize>>, alpha: Option<f64>) -> Self {
        Self { assignments, alpha }
    }

    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client_indices(&self, client: usize) -> &[usize] {
        &self.assignments[client]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn assignments_mut(&mut self) -> &mut Vec<Vec<usize>> {
        &mut self.assignments
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    /// Checks that every sample index in `0..n_samples` appears exactly once
    /// across all clients.
    pub fn validate_exact_cover(&self, n_samples: usize) -> Result<(), DataError> {
        let mut seen = vec![false; n_samples];
        let mut total = 0usize;
        for (client, idxs) in self.assignments.iter().enumerate() {
            for &i in idxs {
                if i >= n_samples {
                    return Err(DataError::BadPartition(format!(
                        "client {client} holds out-of-range index {i}"
                    )));
                }
                if seen[i] {
                    return Err(DataError::BadPartition(format!(
                        "sample {i} assigned more than once"
                    )));
                }
                seen[i] = true;
                total += 1;
            }
        }
        if total != n_samples {
            return Err(DataError::BadPartition(format!(
                "{total} of {n_samples} samples assigned"
            )));
        }
        Ok(())
    }

    /// Per-client per-class sample counts (clients × classes).
    pub fn class_count_matrix(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idxs| {
                let mut counts = vec![0usize; dataset.n_classes()];
                for &i in idxs {
                    counts[dataset.label(i)] += 1;
                }
                counts
            })
            .collect()
    }
}

/// Indices of the ASR evaluation set: every sample whose original label is
/// not the attack target. Guarantees the evaluation set never contains a
/// sample that is already of the target class.
pub fn asr_eval_indices(dataset: &Dataset, target_class: usize) -> Vec<usize> {
    (0..dataset.n_samples())
        .filter(|&i| dataset.label(i) != target_class)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dataset_rejects_bad_labels_and_out_of_range_values() {
        let xs = array![[0.1, 0.2], [0.3, 0.4]];
        let err = Dataset::new(xs.clone(), vec![0, 5], 3, None).unwrap_err();
        assert!(matches!(err, DataError::BadLabel { label: 5, .. }));

        let bad = array![[0.1, 1.5]];
        let err = Dataset::new(bad, vec![0], 2, None).unwrap_err();
        assert!(matches!(err, DataError::ValueOutOfRange { .. }));
    }

    #[test]
    fn exact_cover_validation_catches_duplicates_and_gaps() {
        let ok = PartitionMap::new(vec![vec![0, 2], vec![1]], None);
        ok.validate_exact_cover(3).unwrap();

        let dup = PartitionMap::new(vec![vec![0, 1], vec![1]], None);
        assert!(dup.validate_exact_cover(3).is_err());

        let gap = PartitionMap::new(vec![vec![0], vec![1]], None);
        assert!(gap.validate_exact_cover(3).is_err());
    }

    #[test]
    fn asr_eval_indices_exclude_target_class() {
        let xs = array![[0.0], [0.5], [1.0], [0.25]];
        let ds = Dataset::new(xs, vec![0, 1, 0, 2], 3, None).unwrap();
        let idx = asr_eval_indices(&ds, 0);
        assert_eq!(idx, vec![1, 3]);
        assert!(idx.iter().all(|&i| ds.label(i) != 0));
    }
}
