//! Backdoor trigger specification and injection.
//!
//! Triggers operate on raw `[0, 1]` inputs, before any normalization in the
//! model pipeline. Pattern triggers overwrite pixels; the edge-case kind
//! replaces whole samples with members of an out-of-distribution pool.

use std::sync::Arc;

use ndarray::Array2;

use super::{DataError, Dataset};

/// The four supported trigger families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerKind {
    /// A fixed pixel patch stamped onto every poisoned sample.
    FixedPattern,
    /// One fragment of a patch that a coordinated group splits among its
    /// members; evaluation uses the assembled full patch.
    DistributedFragment,
    /// A pixel patch whose values are tuned by gradient descent against the
    /// current global model.
    OptimizedPattern,
    /// Out-of-distribution samples relabeled to the target class.
    EdgeCase,
}

impl TriggerKind {
    pub fn is_pattern(self) -> bool {
        !matches!(self, TriggerKind::EdgeCase)
    }
}

/// One trigger pixel: position (row, col, channel) and replacement value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchPixel {
    pub row: usize,
    pub col: usize,
    pub channel: usize,
    pub value: f64,
}

/// A fully-resolved trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub target_class: usize,
    /// Pixel patch for the pattern kinds (row-major order). Empty for
    /// edge-case triggers.
    patch: Vec<PatchPixel>,
    /// `(fragment_index, fragment_count)` when this spec is one fragment of
    /// a distributed trigger.
    pub fragment: Option<(usize, usize)>,
    /// Auxiliary OOD pool for edge-case triggers.
    pub edge_pool: Option<Arc<Dataset>>,
}

impl TriggerSpec {
    /// Builds a pattern trigger (fixed, distributed source, or optimized).
    /// Pixels are stored in row-major order; values must lie in `[0, 1]`.
    pub fn pattern(
        kind: TriggerKind,
        target_class: usize,
        mut patch: Vec<PatchPixel>,
    ) -> Result<Self, DataError> {
        if !kind.is_pattern() {
            return Err(DataError::InvalidArgument(
                "edge-case triggers take a pool, not a patch".into(),
            ));
        }
        if patch.is_empty() {
            return Err(DataError::MissingPatch(match kind {
                TriggerKind::FixedPattern => "fixed_pattern",
                TriggerKind::DistributedFragment => "distributed_fragments",
                TriggerKind::OptimizedPattern => "optimized_pattern",
                TriggerKind::EdgeCase => unreachable!(),
            }));
        }
        for p in &patch {
            if !(0.0..=1.0).contains(&p.value) {
                return Err(DataError::PatchValueOutOfRange(p.value));
            }
        }
        patch.sort_by_key(|p| (p.row, p.col, p.channel));
        Ok(Self {
            kind,
            target_class,
            patch,
            fragment: None,
            edge_pool: None,
        })
    }

    /// Builds an edge-case trigger around an OOD pool.
    pub fn edge_case(target_class: usize, pool: Arc<Dataset>) -> Result<Self, DataError> {
        if pool.n_samples() == 0 {
            return Err(DataError::EmptyEdgePool);
        }
        Ok(Self {
            kind: TriggerKind::EdgeCase,
            target_class,
            patch: Vec::new(),
            fragment: None,
            edge_pool: Some(pool),
        })
    }

    pub fn patch(&self) -> &[PatchPixel] {
        &self.patch
    }

    /// Replaces the patch values (same positions) — used by trigger
    /// optimization. Values are validated against `[0, 1]`.
    pub fn with_patch_values(&self, values: &[f64]) -> Result<Self, DataError> {
        if values.len() != self.patch.len() {
            return Err(DataError::InvalidArgument(format!(
                "expected {} patch values, got {}",
                self.patch.len(),
                values.len()
            )));
        }
        let mut out = self.clone();
        for (p, &v) in out.patch.iter_mut().zip(values) {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::PatchValueOutOfRange(v));
            }
            p.value = v;
        }
        Ok(out)
    }

    /// Flat feature index of each patch pixel for the given feature space.
    /// With no image shape the input is treated as a 1 × d × 1 image.
    pub fn patch_feature_indices(
        &self,
        image_shape: Option<(usize, usize, usize)>,
        n_features: usize,
    ) -> Result<Vec<usize>, DataError> {
        let (rows, cols, channels) = image_shape.unwrap_or((1, n_features, 1));
        self.patch
            .iter()
            .map(|p| {
                if p.row >= rows || p.col >= cols || p.channel >= channels {
                    return Err(DataError::PatchOutOfBounds {
                        row: p.row,
                        col: p.col,
                        channel: p.channel,
                        rows,
                        cols,
                        channels,
                    });
                }
                Ok((p.row * cols + p.col) * channels + p.channel)
            })
            .collect()
    }
}

/// Builds a rectangular patch of constant value (row-major order).
pub fn rect_patch(
    origin: (usize, usize),
    size: (usize, usize),
    value: f64,
    channels: usize,
) -> Vec<PatchPixel> {
    let mut patch = Vec::with_capacity(size.0 * size.1 * channels);
    for r in origin.0..origin.0 + size.0 {
        for c in origin.1..origin.1 + size.1 {
            for ch in 0..channels {
                patch.push(PatchPixel {
                    row: r,
                    col: c,
                    channel: ch,
                    value,
                });
            }
        }
    }
    patch
}

/// FNV-1a over the raw bit pattern of the sample: a pure, deterministic way
/// for edge-case injection to pick a pool member for a given sample.
fn sample_hash(sample: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in sample {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

/// Applies a trigger to one raw-space sample, returning the poisoned sample
/// and the target label.
///
/// Pattern kinds overwrite the patch pixels and leave everything else
/// untouched; the edge-case kind replaces the sample with a pool member
/// chosen by a stable hash of the input. Outputs stay within `[0, 1]`.
pub fn apply_trigger(
    sample: &[f64],
    image_shape: Option<(usize, usize, usize)>,
    trigger: &TriggerSpec,
) -> Result<(Vec<f64>, usize), DataError> {
    match trigger.kind {
        TriggerKind::EdgeCase => {
            let pool = trigger.edge_pool.as_ref().ok_or(DataError::EmptyEdgePool)?;
            let pick = (sample_hash(sample) % pool.n_samples() as u64) as usize;
            Ok((pool.input_row(pick).to_vec(), trigger.target_class))
        }
        _ => {
            let indices = trigger.patch_feature_indices(image_shape, sample.len())?;
            let mut out = sample.to_vec();
            for (feature, pixel) in indices.into_iter().zip(trigger.patch()) {
                out[feature] = pixel.value;
            }
            Ok((out, trigger.target_class))
        }
    }
}

/// Poisons the first `poison_count` rows of an already-shuffled batch
/// in place (inputs are raw `[0, 1]` space).
pub fn poison_batch(
    xs: &mut Array2<f64>,
    ys: &mut [usize],
    image_shape: Option<(usize, usize, usize)>,
    trigger: &TriggerSpec,
    poison_count: usize,
) -> Result<(), DataError> {
    if poison_count > xs.nrows() {
        return Err(DataError::PoisonCountExceedsBatch {
            count: poison_count,
            batch: xs.nrows(),
        });
    }
    for i in 0..poison_count {
        let row_vec = xs.row(i).to_vec();
        let (poisoned, label) = apply_trigger(&row_vec, image_shape, trigger)?;
        for (dst, src) in xs.row_mut(i).iter_mut().zip(&poisoned) {
            *dst = *src;
        }
        ys[i] = label;
    }
    Ok(())
}

/// Splits a pattern trigger into `n_fragments` equal contiguous chunks of
/// its row-major pixel list. Errors when the pixel count is not divisible,
/// listing the fragment counts that would work.
pub fn make_fragments(
    trigger: &TriggerSpec,
    n_fragments: usize,
) -> Result<Vec<TriggerSpec>, DataError> {
    if !trigger.kind.is_pattern() {
        return Err(DataError::InvalidArgument(
            "edge-case triggers cannot be fragmented".into(),
        ));
    }
    if n_fragments == 0 {
        return Err(DataError::InvalidArgument("n_fragments must be >= 1".into()));
    }
    let pixels = trigger.patch.len();
    if pixels % n_fragments != 0 {
        let divisors: Vec<usize> = (1..=pixels).filter(|d| pixels % d == 0).collect();
        return Err(DataError::FragmentIndivisible {
            pixels,
            requested: n_fragments,
            divisors,
        });
    }
    let chunk = pixels / n_fragments;
    Ok((0..n_fragments)
        .map(|f| {
            let mut frag = trigger.clone();
            frag.kind = TriggerKind::DistributedFragment;
            frag.patch = trigger.patch[f * chunk..(f + 1) * chunk].to_vec();
            frag.fragment = Some((f, n_fragments));
            frag
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_ood;
    use ndarray::array;
    use proptest::prelude::*;

    fn fixed_2x2() -> TriggerSpec {
        TriggerSpec::pattern(
            TriggerKind::FixedPattern,
            7,
            rect_patch((0, 0), (2, 2), 1.0, 1),
        )
        .unwrap()
    }

    #[test]
    fn pattern_overwrites_only_patch_pixels() {
        let trigger = fixed_2x2();
        let sample: Vec<f64> = (0..16).map(|i| i as f64 / 31.0).collect();
        let (out, label) = apply_trigger(&sample, Some((4, 4, 1)), &trigger).unwrap();
        assert_eq!(label, 7);
        // Patch positions (0,0),(0,1),(1,0),(1,1) map to flat 0,1,4,5.
        for (i, (o, s)) in out.iter().zip(&sample).enumerate() {
            if [0, 1, 4, 5].contains(&i) {
                assert_eq!(*o, 1.0);
            } else {
                assert_eq!(o, s, "pixel {i} must be untouched");
            }
        }
    }

    #[test]
    fn out_of_bounds_patch_is_rejected() {
        let trigger = TriggerSpec::pattern(
            TriggerKind::FixedPattern,
            0,
            vec![PatchPixel { row: 5, col: 0, channel: 0, value: 1.0 }],
        )
        .unwrap();
        let sample = vec![0.0; 16];
        let err = apply_trigger(&sample, Some((4, 4, 1)), &trigger).unwrap_err();
        assert!(matches!(err, DataError::PatchOutOfBounds { row: 5, .. }));
    }

    #[test]
    fn patch_values_outside_unit_interval_rejected_at_construction() {
        let err = TriggerSpec::pattern(
            TriggerKind::FixedPattern,
            0,
            vec![PatchPixel { row: 0, col: 0, channel: 0, value: 1.5 }],
        )
        .unwrap_err();
        assert!(matches!(err, DataError::PatchValueOutOfRange(_)));
    }

    #[test]
    fn flat_inputs_use_column_indexing() {
        let trigger = TriggerSpec::pattern(
            TriggerKind::FixedPattern,
            1,
            vec![PatchPixel { row: 0, col: 3, channel: 0, value: 0.9 }],
        )
        .unwrap();
        let sample = vec![0.1; 6];
        let (out, _) = apply_trigger(&sample, None, &trigger).unwrap();
        assert_eq!(out[3], 0.9);
        assert!(out.iter().enumerate().all(|(i, &v)| i == 3 || v == 0.1));
    }

    #[test]
    fn fragments_partition_pixels_in_row_major_order() {
        let trigger = fixed_2x2();
        let frags = make_fragments(&trigger, 2).unwrap();
        assert_eq!(frags.len(), 2);
        assert_eq!(frags[0].patch().len(), 2);
        assert_eq!(frags[1].patch().len(), 2);
        assert_eq!(frags[0].fragment, Some((0, 2)));
        // Row-major: fragment 0 gets row 0, fragment 1 gets row 1.
        assert!(frags[0].patch().iter().all(|p| p.row == 0));
        assert!(frags[1].patch().iter().all(|p| p.row == 1));
        // Union of fragment pixels = original patch.
        let mut union: Vec<PatchPixel> = frags
            .iter()
            .flat_map(|f| f.patch().iter().copied())
            .collect();
        union.sort_by_key(|p| (p.row, p.col, p.channel));
        assert_eq!(union, trigger.patch().to_vec());
    }

    #[test]
    fn indivisible_fragment_count_suggests_divisors() {
        let trigger = fixed_2x2(); // 4 pixels
        let err = make_fragments(&trigger, 3).unwrap_err();
        match err {
            DataError::FragmentIndivisible { pixels, requested, divisors } => {
                assert_eq!(pixels, 4);
                assert_eq!(requested, 3);
                assert_eq!(divisors, vec![1, 2, 4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn poison_batch_hits_exactly_the_first_rows() {
        let trigger = fixed_2x2();
        let mut xs = Array2::from_elem((3, 16), 0.25);
        let mut ys = vec![0usize, 1, 2];
        poison_batch(&mut xs, &mut ys, Some((4, 4, 1)), &trigger, 2).unwrap();
        assert_eq!(ys, vec![7, 7, 2]);
        assert_eq!(xs[[0, 0]], 1.0);
        assert_eq!(xs[[1, 5]], 1.0);
        assert_eq!(xs[[2, 0]], 0.25, "unpoisoned row must be untouched");
    }

    #[test]
    fn poison_count_beyond_batch_errors() {
        let trigger = fixed_2x2();
        let mut xs = array![[0.0, 0.0]];
        let mut ys = vec![0usize];
        let err = poison_batch(&mut xs, &mut ys, None, &trigger, 2).unwrap_err();
        assert!(matches!(
            err,
            DataError::PoisonCountExceedsBatch { count: 2, batch: 1 }
        ));
    }

    #[test]
    fn edge_case_replaces_sample_with_pool_member() {
        let pool = Arc::new(gen_synthetic_ood(9, 8, 4, 0.05, 3, 1).unwrap());
        let trigger = TriggerSpec::edge_case(2, pool.clone()).unwrap();
        let sample = vec![0.5; 8];
        let (out, label) = apply_trigger(&sample, None, &trigger).unwrap();
        assert_eq!(label, 2);
        let found = (0..pool.n_samples()).any(|i| pool.input_row(i).to_vec() == out);
        assert!(found, "output must be a pool member");
        // Pure function: same sample, same pool member.
        let (again, _) = apply_trigger(&sample, None, &trigger).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn empty_edge_pool_is_rejected() {
        // Dataset::new already rejects empty datasets, so exercise the
        // trigger-level guard through a direct constructor misuse.
        let pool = Arc::new(gen_synthetic_ood(1, 4, 2, 0.0, 0, 1).unwrap());
        let trigger = TriggerSpec::edge_case(0, pool).unwrap();
        assert!(trigger.edge_pool.is_some());
    }

    proptest! {
        /// Any pattern trigger applied to any in-range image keeps every
        /// value inside [0, 1] and relabels to the target.
        #[test]
        fn poisoned_outputs_stay_in_unit_interval(
            pixels in proptest::collection::vec((0usize..4, 0usize..4, 0.0f64..=1.0), 1..8),
            base in proptest::collection::vec(0.0f64..=1.0, 16),
            target in 0usize..10,
        ) {
            let patch: Vec<PatchPixel> = pixels
                .into_iter()
                .map(|(row, col, value)| PatchPixel { row, col, channel: 0, value })
                .collect();
            let trigger = TriggerSpec::pattern(TriggerKind::FixedPattern, target, patch).unwrap();
            let (out, label) = apply_trigger(&base, Some((4, 4, 1)), &trigger).unwrap();
            prop_assert_eq!(label, target);
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
