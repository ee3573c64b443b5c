//! Synthetic Gaussian-cluster dataset generator.
//!
//! Each class owns a block of feature coordinates held at a high level while
//! all other coordinates sit at a low level; samples are the class center
//! plus isotropic Gaussian noise, clipped to `[0, 1]`. The 0.6 gap between
//! levels makes the classes linearly separable by a wide margin whenever the
//! spread is small (≤ 0.1), which keeps desk-scale experiments meaningful.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};

use crate::params::{derive_rng, SeedSpec, StreamTag};

use super::{DataError, Dataset};

const HIGH: f64 = 0.8;
const LOW: f64 = 0.2;

fn class_center(class: usize, n_features: usize, n_classes: usize) -> Vec<f64> {
    let block = n_features / n_classes;
    let start = class * block;
    let end = start + block;
    (0..n_features)
        .map(|j| if j >= start && j < end { HIGH } else { LOW })
        .collect()
}

fn sample_cluster(
    center: &[f64],
    n: usize,
    spread: f64,
    rng: &mut impl rand_chacha::rand_core::RngCore,
) -> Result<Array2<f64>, DataError> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal is valid");
    let mut xs = Array2::zeros((n, center.len()));
    for i in 0..n {
        let mut row = xs.row_mut(i);
        for (v, &c) in row.iter_mut().zip(center) {
            let z = if spread > 0.0 { noise.sample(rng) * spread } else { 0.0 };
            *v = (c + z).clamp(0.0, 1.0);
        }
    }
    Ok(xs)
}

/// Generates `n_samples` points from `n_classes` Gaussian clusters in
/// `[0, 1]^n_features`. Labels cycle through classes so class sizes are
/// balanced to within one sample. Identical arguments produce byte-identical
/// datasets.
pub fn gen_synthetic(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n_samples == 0 {
        return Err(DataError::EmptyDataset);
    }
    if n_classes < 2 {
        return Err(DataError::InvalidArgument(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    if n_features < n_classes {
        return Err(DataError::InvalidArgument(format!(
            "need n_features >= n_classes for separable clusters, got {n_features} < {n_classes}"
        )));
    }
    if cluster_spread < 0.0 {
        return Err(DataError::InvalidArgument(format!(
            "cluster_spread must be >= 0, got {cluster_spread}"
        )));
    }

    let mut rng = derive_rng(SeedSpec {
        master_seed: seed,
        round: 0,
        client_id: 0,
        stream_tag: StreamTag::Init,
    });
    let noise = Normal::new(0.0, 1.0).expect("unit normal is valid");
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| class_center(c, n_features, n_classes))
        .collect();
    let mut inputs = Array2::zeros((n_samples, n_features));
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % n_classes;
        labels.push(class);
        let mut row = inputs.row_mut(i);
        for (v, &c) in row.iter_mut().zip(&centers[class]) {
            let z = if cluster_spread > 0.0 {
                noise.sample(&mut rng) * cluster_spread
            } else {
                0.0
            };
            *v = (c + z).clamp(0.0, 1.0);
        }
    }
    Dataset::new(inputs, labels, n_classes, None)
}

/// Generates an out-of-distribution pool for edge-case triggers: one cluster
/// whose center sits `3 × cluster_spread` beyond the high level of every
/// class center (clamped into `[0, 1]`). Pool samples carry `ood_label` as
/// their original label so downstream ASR evaluation can exclude the target
/// class; `ood_label` must differ from the intended attack target.
pub fn gen_synthetic_ood(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    cluster_spread: f64,
    seed: u64,
    ood_label: usize,
) -> Result<Dataset, DataError> {
    if n_samples == 0 {
        return Err(DataError::EmptyDataset);
    }
    if ood_label >= n_classes {
        return Err(DataError::BadLabel {
            label: ood_label,
            n_classes,
        });
    }
    let mut rng = derive_rng(SeedSpec {
        master_seed: seed,
        round: 0,
        client_id: 1,
        stream_tag: StreamTag::Init,
    });
    let level = (HIGH + 3.0 * cluster_spread).min(1.0);
    let center = vec![level; n_features];
    let inputs = sample_cluster(&center, n_samples, cluster_spread, &mut rng)?;
    Dataset::new(inputs, vec![ood_label; n_samples], n_classes, None)
}
