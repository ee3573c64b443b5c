//! Flat parameter vectors, splittable seeded RNG streams, and order-fixed
//! reductions.
//!
//! Everything that aggregates client updates goes through [`fixed_order_sum`]
//! so that results are bit-identical regardless of how many workers produced
//! the inputs. Every random draw in the simulator comes from a ChaCha8 stream
//! derived from a [`SeedSpec`], so any (round, client, purpose) triple can be
//! replayed in isolation.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from parameter-vector construction and arithmetic.
#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter vector is empty")]
    Empty,
    #[error("length mismatch: expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("layout describes {layout} values but the vector holds {values}")]
    LayoutMismatch { layout: usize, values: usize },
    #[error("empty input list")]
    EmptyInput,
}

/// One named tensor in a flat parameter vector: `(name, shape)`.
pub type LayoutEntry = (String, Vec<usize>);

/// A model's parameters flattened into a single `f64` vector plus an ordered
/// layout describing how the values map back to named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayoutEntry>,
}

impl ParamVector {
    /// Builds a vector, checking that the layout covers exactly
    /// `values.len()` entries.
    pub fn new(values: Vec<f64>, layout: Vec<LayoutEntry>) -> Result<Self, ParamError> {
        let covered: usize = layout
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum();
        if covered != values.len() {
            return Err(ParamError::LayoutMismatch {
                layout: covered,
                values: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    /// Convenience constructor for structureless vectors (tests, synthetic
    /// update harnesses): a single layout entry named `flat`.
    pub fn flat(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            layout: vec![("flat".to_string(), vec![n])],
        }
    }

    /// A zero vector with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the values. The layout invariant is preserved
    /// because a `&mut [f64]` cannot change the length.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True when both vectors share length and layout.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.values.len() == other.values.len() && self.layout == other.layout
    }

    /// `self += other`, element-wise.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), ParamError> {
        if other.values.len() != self.values.len() {
            return Err(ParamError::LengthMismatch {
                expected: self.values.len(),
                got: other.values.len(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
        Ok(())
    }

    /// `self - other` as a new vector (layout taken from `self`).
    pub fn sub(&self, other: &Self) -> Result<Self, ParamError> {
        if other.values.len() != self.values.len() {
            return Err(ParamError::LengthMismatch {
                expected: self.values.len(),
                got: other.values.len(),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    /// `self *= c`, element-wise.
    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    /// `self * c` as a new vector.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.scale(c);
        out
    }
}

/// Result of [`cosine_sim`]: the similarity plus a flag marking the
/// degenerate zero-norm case (where the value is defined as 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSim {
    pub value: f64,
    pub degenerate: bool,
}

/// Neumaier-compensated sum: tracks a running compensation term so that the
/// result is accurate to ~1 ulp even over millions of addends.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Euclidean norm with compensated accumulation of the squares.
pub fn l2_norm(v: &ParamVector) -> Result<f64, ParamError> {
    if v.is_empty() {
        return Err(ParamError::Empty);
    }
    Ok(compensated_sum(v.values.iter().map(|x| x * x)).sqrt())
}

/// Euclidean norm of a raw slice (same accumulation as [`l2_norm`]).
pub fn l2_norm_slice(v: &[f64]) -> f64 {
    compensated_sum(v.iter().map(|x| x * x)).sqrt()
}

/// Cosine similarity between two vectors. A zero-norm input yields value 0
/// with `degenerate = true` instead of NaN.
pub fn cosine_sim(a: &ParamVector, b: &ParamVector) -> Result<CosineSim, ParamError> {
    if a.is_empty() || b.is_empty() {
        return Err(ParamError::Empty);
    }
    if a.len() != b.len() {
        return Err(ParamError::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = l2_norm(a)?;
    let nb = l2_norm(b)?;
    if na == 0.0 || nb == 0.0 {
        return Ok(CosineSim {
            value: 0.0,
            degenerate: true,
        });
    }
    let dot = compensated_sum(a.values.iter().zip(&b.values).map(|(x, y)| x * y));
    Ok(CosineSim {
        value: dot / (na * nb),
        degenerate: false,
    })
}

/// Element-wise sum taken strictly in the order given.
///
/// Callers that reduce client updates must pass the list ordered by
/// `client_id` ascending; doing so makes the result bit-identical no matter
/// how many workers computed the inputs, because floating-point addition
/// happens in one fixed sequence.
pub fn fixed_order_sum<'a, I>(vs: I) -> Result<ParamVector, ParamError>
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    let mut iter = vs.into_iter();
    let first = iter.next().ok_or(ParamError::EmptyInput)?;
    let mut acc = first.clone();
    for v in iter {
        acc.add_assign(v)?;
    }
    Ok(acc)
}

/// Purpose tag for a derived RNG stream. Distinct tags guarantee that two
/// different uses of randomness for the same (round, client) never share a
/// stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamTag {
    /// Model weight initialization.
    Init,
    /// Training-order shuffles (epoch permutations, partition dealing).
    Shuffle,
    /// Additive noise (LDP, synthetic data jitter).
    Noise,
    /// Dirichlet proportion draws for partitioning.
    Dirichlet,
    /// Per-round client selection (server-side).
    Selection,
    /// Trigger-pattern optimization.
    TriggerOpt,
    /// Post-aggregation server noise.
    ServerNoise,
    /// Per-client sample-cap truncation.
    Truncate,
    /// Held-out evaluation subsampling.
    EvalSubsample,
}

impl StreamTag {
    fn as_u64(self) -> u64 {
        match self {
            StreamTag::Init => 0,
            StreamTag::Shuffle => 1,
            StreamTag::Noise => 2,
            StreamTag::Dirichlet => 3,
            StreamTag::Selection => 4,
            StreamTag::TriggerOpt => 5,
            StreamTag::ServerNoise => 6,
            StreamTag::Truncate => 7,
            StreamTag::EvalSubsample => 8,
        }
    }
}

/// Fully determines one RNG stream: master seed plus the (round, client,
/// purpose) coordinates of the draw site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub round: u64,
    pub client_id: u64,
    pub stream_tag: StreamTag,
}

/// splitmix64 finalizer: a full-avalanche 64-bit mixer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha8 stream for a seed spec.
///
/// The four fields are folded through the splitmix64 finalizer one at a time
/// and the result is expanded to a 256-bit ChaCha key, so specs differing in
/// any single field produce unrelated streams.
pub fn derive_rng(spec: SeedSpec) -> ChaCha8Rng {
    let mut s = mix64(spec.master_seed);
    s = mix64(s ^ spec.round);
    s = mix64(s ^ spec.client_id);
    s = mix64(s ^ spec.stream_tag.as_u64());
    let mut key = [0u8; 32];
    let mut word = s;
    for chunk in key.chunks_exact_mut(8) {
        word = mix64(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw in [0, 1) using the top 53 bits of one `u64`.
pub fn uniform_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Unbiased draw from `0..n` (Lemire's rejection method over `next_u64`).
///
/// Implemented here rather than via `rand` so shuffle and sampling results
/// stay reproducible independent of `rand`'s internal algorithms.
pub fn bounded_u64(rng: &mut impl RngCore, n: u64) -> u64 {
    assert!(n > 0, "bounded_u64 requires n > 0");
    let mut x = rng.next_u64();
    let mut m = (x as u128) * (n as u128);
    let mut lo = m as u64;
    if lo < n {
        let threshold = n.wrapping_neg() % n;
        while lo < threshold {
            x = rng.next_u64();
            m = (x as u128) * (n as u128);
            lo = m as u64;
        }
    }
    (m >> 64) as u64
}

/// In-place Fisher–Yates shuffle driven by [`bounded_u64`].
pub fn seeded_shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = bounded_u64(rng, (i + 1) as u64) as usize;
        items.swap(i, j);
    }
}

/// Draws `k` distinct indices from `0..n` (partial Fisher–Yates). The result
/// is in draw order; sort it if a canonical order is needed.
pub fn sample_without_replacement(n: usize, k: usize, rng: &mut impl RngCore) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} items from {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + bounded_u64(rng, (n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn layout_mismatch_rejected() {
        let err = ParamVector::new(vec![0.0; 5], vec![("w".into(), vec![2, 3])]).unwrap_err();
        assert!(matches!(
            err,
            ParamError::LayoutMismatch { layout: 6, values: 5 }
        ));
    }

    #[test]
    fn l2_norm_of_unit_axes() {
        let v = ParamVector::flat(vec![3.0, 4.0]);
        assert_eq!(l2_norm(&v).unwrap(), 5.0);
    }

    #[test]
    fn l2_norm_empty_vector_errors() {
        let v = ParamVector::flat(vec![]);
        assert!(matches!(l2_norm(&v), Err(ParamError::Empty)));
    }

    /// Oracle: recursive pairwise summation — a different algorithm family
    /// from the Neumaier accumulation used by the implementation.
    fn pairwise_sum(xs: &[f64]) -> f64 {
        match xs.len() {
            0 => 0.0,
            1 => xs[0],
            n => {
                let mid = n / 2;
                pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
            }
        }
    }

    #[test]
    fn l2_norm_matches_pairwise_oracle_on_a_million_values() {
        let mut rng = derive_rng(SeedSpec {
            master_seed: 7,
            round: 0,
            client_id: 0,
            stream_tag: StreamTag::Init,
        });
        let values: Vec<f64> = (0..1_000_000)
            .map(|_| uniform_f64(&mut rng) * 2.0 - 1.0)
            .collect();
        let squares: Vec<f64> = values.iter().map(|x| x * x).collect();
        let oracle = pairwise_sum(&squares).sqrt();
        let got = l2_norm(&ParamVector::flat(values)).unwrap();
        let rel = (got - oracle).abs() / oracle;
        assert!(rel < 1e-12, "relative error {rel} vs oracle");
    }

    #[test]
    fn cosine_sim_orthogonal_and_parallel() {
        let a = ParamVector::flat(vec![1.0, 0.0]);
        let b = ParamVector::flat(vec![0.0, 1.0]);
        let c = ParamVector::flat(vec![2.0, 0.0]);
        assert_eq!(cosine_sim(&a, &b).unwrap().value, 0.0);
        let par = cosine_sim(&a, &c).unwrap();
        assert!((par.value - 1.0).abs() < 1e-15);
        assert!(!par.degenerate);
    }

    #[test]
    fn cosine_sim_zero_norm_is_flagged_zero() {
        let a = ParamVector::flat(vec![0.0, 0.0]);
        let b = ParamVector::flat(vec![1.0, 2.0]);
        let out = cosine_sim(&a, &b).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.degenerate);
    }

    #[test]
    fn cosine_sim_length_mismatch_errors() {
        let a = ParamVector::flat(vec![1.0]);
        let b = ParamVector::flat(vec![1.0, 2.0]);
        assert!(matches!(
            cosine_sim(&a, &b),
            Err(ParamError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn fixed_order_sum_is_bit_stable_and_checks_lengths() {
        let vs: Vec<ParamVector> = (0..6)
            .map(|i| ParamVector::flat(vec![0.1 * i as f64, 1.0 / (i + 1) as f64, -0.3]))
            .collect();
        let refs: Vec<&ParamVector> = vs.iter().collect();
        let a = fixed_order_sum(refs.iter().copied()).unwrap();
        let b = fixed_order_sum(refs.iter().copied()).unwrap();
        let bits = |v: &ParamVector| -> Vec<u64> {
            v.values().iter().map(|x| x.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b), "repeat runs must agree bit-for-bit");

        let short = ParamVector::flat(vec![1.0]);
        let bad = fixed_order_sum([&vs[0], &short]);
        assert!(matches!(bad, Err(ParamError::LengthMismatch { .. })));
        assert!(matches!(
            fixed_order_sum(std::iter::empty::<&ParamVector>()),
            Err(ParamError::EmptyInput)
        ));
    }

    #[test]
    fn derive_rng_is_reproducible() {
        let spec = SeedSpec {
            master_seed: 42,
            round: 3,
            client_id: 17,
            stream_tag: StreamTag::Shuffle,
        };
        let mut a = derive_rng(spec);
        let mut b = derive_rng(spec);
        let xs: Vec<u64> = (0..32).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..32).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn derive_rng_no_prefix_collisions_across_field_changes() {
        // 10^4 spec pairs differing in exactly one field: the 16-byte stream
        // prefixes must all be distinct (and differ from each other).
        let mut prefixes: HashSet<[u8; 16]> = HashSet::new();
        let mut meta = derive_rng(SeedSpec {
            master_seed: 99,
            round: 0,
            client_id: 0,
            stream_tag: StreamTag::Init,
        });
        let tags = [
            StreamTag::Init,
            StreamTag::Shuffle,
            StreamTag::Noise,
            StreamTag::Dirichlet,
        ];
        let mut count = 0usize;
        for _ in 0..2500 {
            let base = SeedSpec {
                master_seed: meta.next_u64(),
                round: meta.next_u64() % 1000,
                client_id: meta.next_u64() % 1000,
                stream_tag: tags[(meta.next_u64() % 4) as usize],
            };
            let variants = [
                SeedSpec { master_seed: base.master_seed ^ 1, ..base },
                SeedSpec { round: base.round + 1, ..base },
                SeedSpec { client_id: base.client_id + 1, ..base },
                SeedSpec {
                    stream_tag: tags[(tags.iter().position(|t| *t == base.stream_tag).unwrap() + 1) % 4],
                    ..base
                },
            ];
            for spec in [base].iter().chain(variants.iter()) {
                let mut rng = derive_rng(*spec);
                let mut prefix = [0u8; 16];
                rng.fill_bytes(&mut prefix);
                prefixes.insert(prefix);
                count += 1;
            }
        }
        assert!(count >= 10_000);
        assert_eq!(prefixes.len(), count, "stream prefix collision detected");
    }

    #[test]
    fn bounded_u64_stays_in_range_and_covers_values() {
        let mut rng = derive_rng(SeedSpec {
            master_seed: 5,
            round: 0,
            client_id: 0,
            stream_tag: StreamTag::Noise,
        });
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let x = bounded_u64(&mut rng, 7) as usize;
            assert!(x < 7);
            seen[x] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn sample_without_replacement_distinct_and_complete() {
        let mut rng = derive_rng(SeedSpec {
            master_seed: 11,
            round: 2,
            client_id: 0,
            stream_tag: StreamTag::Selection,
        });
        let picks = sample_without_replacement(10, 10, &mut rng);
        let set: HashSet<usize> = picks.iter().copied().collect();
        assert_eq!(set.len(), 10);
        let partial = sample_without_replacement(100, 7, &mut rng);
        assert_eq!(partial.len(), 7);
        assert_eq!(partial.iter().collect::<HashSet<_>>().len(), 7);
    }

    proptest! {
        /// Scaling one argument never changes the cosine value (beyond fp
        /// noise) and norms scale linearly.
        #[test]
        fn cosine_scale_invariance(
            xs in proptest::collection::vec(-100.0f64..100.0, 2..20),
            ys_seed in 0u64..1000,
            c in 0.125f64..8.0,
        ) {
            let n = xs.len();
            let mut rng = derive_rng(SeedSpec {
                master_seed: ys_seed, round: 0, client_id: 0, stream_tag: StreamTag::Noise,
            });
            let ys: Vec<f64> = (0..n).map(|_| uniform_f64(&mut rng) * 2.0 - 1.0).collect();
            let a = ParamVector::flat(xs);
            let b = ParamVector::flat(ys);
            let base = cosine_sim(&a, &b).unwrap();
            let scaled = cosine_sim(&a.scaled(c), &b).unwrap();
            if !base.degenerate && !scaled.degenerate {
                prop_assert!((base.value - scaled.value).abs() < 1e-9);
            }
            let na = l2_norm(&a);
            if let Ok(na) = na {
                let nca = l2_norm(&a.scaled(c)).unwrap();
                prop_assert!((nca - c * na).abs() <= 1e-9 * (1.0 + nca));
            }
        }
    }
}
