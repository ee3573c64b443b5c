//! Robust aggregation rules, anomaly detection, and noise-based defenses.
//!
//! Defenses never see ground-truth maliciousness: they operate on
//! [`UpdateView`] projections of [`ClientUpdate`], which expose only the
//! client id, the update vector, the declared sample count, and the wall
//! time. Every rule processes updates in ascending client-id order, so the
//! result is independent of arrival order (and therefore of worker count).

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{fixed_order_sum, l2_norm_slice, ParamError, ParamVector};

/// Errors from aggregation and detection.
#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("{rule} requires n >= f + 3 updates (f = {f}), got n = {n}")]
    TooFewUpdates { rule: &'static str, f: usize, n: usize },
    #[error("trimmed mean requires 2·trim_k < n, got trim_k = {trim_k} with n = {n}")]
    TrimTooLarge { trim_k: usize, n: usize },
    #[error("multi-krum selection size m must satisfy 1 <= m <= n, got m = {m} with n = {n}")]
    BadSelectionSize { m: usize, n: usize },
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// A client's finished contribution for one round, including ground truth
/// the server may never reveal to a defense.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: ParamVector,
    pub declared_num_samples: usize,
    pub train_wall_ms: u64,
    /// Ground truth for metrics only; excluded from [`UpdateView`].
    pub truth_is_malicious: bool,
}

/// The defense-facing projection of a [`ClientUpdate`].
#[derive(Debug, Clone, Copy)]
pub struct UpdateView<'a> {
    pub client_id: usize,
    pub delta: &'a ParamVector,
    pub declared_num_samples: usize,
    pub train_wall_ms: u64,
}

impl ClientUpdate {
    pub fn view(&self) -> UpdateView<'_> {
        UpdateView {
            client_id: self.client_id,
            delta: &self.delta,
            declared_num_samples: self.declared_num_samples,
            train_wall_ms: self.train_wall_ms,
        }
    }
}

/// Which aggregation rule the server runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum AggregationRule {
    FedAvg,
    Median,
    TrimmedMean { trim_k: usize },
    Krum { f: usize },
    MultiKrum { f: usize, m: usize },
    Rfa { tol: f64, max_iter: usize },
    FoolsGold,
    Rlr { threshold: f64 },
    NormClipping { bound: f64 },
}

/// The aggregated update plus rule-specific diagnostics.
#[derive(Debug, Clone)]
pub struct AggregateOutcome {
    /// The aggregate direction the server applies.
    pub update: ParamVector,
    /// When true the rule already folded the server learning rate into
    /// `update` (sign-adaptive rules), so the step is `θ += update` rather
    /// than `θ += η · update`.
    pub includes_server_lr: bool,
    /// Client ids the rule selected (distance-based selection rules).
    pub selected: Option<Vec<usize>>,
    /// Per-client weights in ascending client-id order (similarity rules).
    pub weights: Option<Vec<f64>>,
    /// Whether an iterative rule reached its tolerance before the
    /// iteration cap.
    pub converged: Option<bool>,
    /// Set when a rule degenerated (e.g. all weights zero) and fell back
    /// to the plain average.
    pub fell_back_to_fedavg: bool,
}

impl AggregateOutcome {
    fn plain(update: ParamVector) -> Self {
        Self {
            update,
            includes_server_lr: false,
            selected: None,
            weights: None,
            converged: None,
            fell_back_to_fedavg: false,
        }
    }
}

/// Views sorted by ascending client id: the canonical processing order.
fn ordered<'a, 'b>(views: &'b [UpdateView<'a>]) -> Result<Vec<&'b UpdateView<'a>>, DefenseError> {
    if views.is_empty() {
        return Err(DefenseError::NoUpdates);
    }
    let mut sorted: Vec<&UpdateView> = views.iter().collect();
    sorted.sort_by_key(|v| v.client_id);
    Ok(sorted)
}

/// Unweighted average of the updates, summed in ascending client-id order
/// so the bytes never depend on scheduling.
pub fn fedavg(views: &[UpdateView]) -> Result<AggregateOutcome, DefenseError> {
    let sorted = ordered(views)?;
    let sum = fixed_order_sum(sorted.iter().map(|v| v.delta))?;
    Ok(AggregateOutcome::plain(
        sum.scaled(1.0 / sorted.len() as f64),
    ))
}

/// Per-coordinate median; an even count takes the mean of the two middle
/// values.
pub fn coordinate_median(views: &[UpdateView]) -> Result<AggregateOutcome, DefenseError> {
    let sorted = ordered(views)?;
    trimmed_core(&sorted, 0, true)
}

/// Per-coordinate trimmed mean: drop the `trim_k` lowest and highest
/// values, average the rest. Requires `2·trim_k < n`. `trim_k = 0` is
/// byte-identical to [`fedavg`] (same summation order).
pub fn trimmed_mean(views: &[UpdateView], trim_k: usize) -> Result<AggregateOutcome, DefenseError> {
    let sorted = ordered(views)?;
    if 2 * trim_k >= sorted.len() {
        return Err(DefenseError::TrimTooLarge {
            trim_k,
            n: sorted.len(),
        });
    }
    if trim_k == 0 {
        return fedavg(views);
    }
    trimmed_core(&sorted, trim_k, false)
}

fn trimmed_core(
    sorted: &[&UpdateView],
    trim_k: usize,
    median: bool,
) -> Result<AggregateOutcome, DefenseError> {
    let n = sorted.len();
    let dim = sorted[0].delta.len();
    for v in sorted {
        if v.delta.len() != dim {
            return Err(ParamError::LengthMismatch {
                expected: dim,
                got: v.delta.len(),
            }
            .into());
        }
    }
    let mut out = vec![0.0f64; dim];
    let mut column = vec![0.0f64; n];
    for (c, slot) in out.iter_mut().enumerate() {
        for (i, v) in sorted.iter().enumerate() {
            column[i] = v.delta.values()[c];
        }
        column.sort_by(f64::total_cmp);
        *slot = if median {
            if n % 2 == 1 {
                column[n / 2]
            } else {
                0.5 * (column[n / 2 - 1] + column[n / 2])
            }
        } else {
            let kept = &column[trim_k..n - trim_k];
            kept.iter().sum::<f64>() / kept.len() as f64
        };
    }
    Ok(AggregateOutcome::plain(ParamVector::new(
        out,
        sorted[0].delta.layout().to_vec(),
    )?))
}

/// Squared Euclidean distances between every pair of updates, indexed by
/// position in `sorted`.
fn pairwise_sq_dists(sorted: &[&UpdateView]) -> Result<Vec<Vec<f64>>, DefenseError> {
    let n = sorted.len();
    let dim = sorted[0].delta.len();
    let mut dists = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        if sorted[i].delta.len() != dim {
            return Err(ParamError::LengthMismatch {
                expected: dim,
                got: sorted[i].delta.len(),
            }
            .into());
        }
        for j in i + 1..n {
            let mut acc = 0.0f64;
            for (a, b) in sorted[i]
                .delta
                .values()
                .iter()
                .zip(sorted[j].delta.values())
            {
                let d = a - b;
                acc += d * d;
            }
            dists[i][j] = acc;
            dists[j][i] = acc;
        }
    }
    Ok(dists)
}

/// Krum score of each update: the sum of its `n − f − 2` smallest squared
/// distances to other updates.
fn krum_scores(sorted: &[&UpdateView], f: usize, rule: &'static str) -> Result<Vec<f64>, DefenseError> {
    let n = sorted.len();
    if n < f + 3 {
        return Err(DefenseError::TooFewUpdates { rule, f, n });
    }
    let dists = pairwise_sq_dists(sorted)?;
    let keep = n - f - 2;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dists[i][j]).collect();
        row.sort_by(f64::total_cmp);
        scores.push(row[..keep].iter().sum());
    }
    Ok(scores)
}

/// Krum: returns the single update with the lowest score (ties go to the
/// lower client id). Requires `n >= f + 3`.
pub fn krum(views: &[UpdateView], f: usize) -> Result<AggregateOutcome, DefenseError> {
    let sorted = ordered(views)?;
    let scores = krum_scores(&sorted, f, "krum")?;
    let best = (0..sorted.len())
        .min_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then(sorted[a].client_id.cmp(&sorted[b].client_id))
        })
        .expect("nonempty");
    let mut outcome = AggregateOutcome::plain(sorted[best].delta.clone());
    outcome.selected = Some(vec![sorted[best].client_id]);
    Ok(outcome)
}

/// Multi-Krum: averages the `m` lowest-scoring updates (one-shot scoring,
/// ties to the lower client id). Requires `n >= f + 3` and `1 <= m <= n`.
pub fn multi_krum(
    views: &[UpdateView],
    f: usize,
    m: usize,
) -> Result<AggregateOutcome, DefenseError> {
    let sorted = ordered(views)?;
    if m == 0 || m > sorted.len() {
        return Err(DefenseError::BadSelectionSize { m, n: sorted.len() });
    }
    let scores = krum_scores(&sorted, f, "multi-krum")?;
    let mut order: Vec<usize> = (0..sorted.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then(sorted[a].client_id.cmp(&sorted[b].client_id))
    });
    let chosen = &order[..m];
    let mut ids: Vec<usize> = chosen.iter().map(|&i| sorted[i].client_id).collect();
    ids.sort_unstable();
    let picked: Vec<&UpdateView> = ids
        .iter()
        .map(|id| *sorted.iter().find(|v| v.client_id == *id).expect("chosen id"))
        .collect();
    let sum = fixed_order_sum(picked.iter().map(|v| v.delta))?;
    let mut outcome = AggregateOutcome::plain(sum.scaled(1.0 / m as f64));
    outcome.selected = Some(ids);
    Ok(outcome)
}

const RFA_EPS: f64 = 1e-8;
/// Default Weiszfeld displacement tolerance.
pub const RFA_DEFAULT_TOL: f64 = 1e-6;
/// Default Weiszfeld iteration cap.
pub const RFA_DEFAULT_MAX_ITER: usize = 100;

/// Geometric median via the smoothed Weiszfeld iteration: starts from the
/// mean, reweights by `1 / max(ε, ‖x_i − z‖)` with ε = 1e-8, and stops once
/// the iterate moves less than `tol` (or after `max_iter` iterations,
/// reported via `converged`).
pub fn rfa(views: &[UpdateView], tol: f64, max_iter: usize) -> Result<AggregateOutcome, DefenseError> {
    let sorted = ordered(views)?;
    let n = sorted.len();
    let sum = fixed_order_sum(sorted.iter().map(|v| v.delta))?;
    let mut z = sum.scaled(1.0 / n as f64);
    let mut converged = false;
    for _ in 0..max_iter {
        let mut weights = Vec::with_capacity(n);
        for v in &sorted {
            if v.delta.len() != z.len() {
                return Err(ParamError::LengthMismatch {
                    expected: z.len(),
                    got: v.delta.len(),
                }
                .into());
            }
            let mut acc = 0.0f64;
            for (a, b) in v.delta.values().iter().zip(z.values()) {
                let d = a - b;
                acc += d * d;
            }
            weights.push(1.0 / acc.sqrt().max(RFA_EPS));
        }
        let total: f64 = weights.iter().sum();
        let mut next = vec![0.0f64; z.len()];
        for (v, w) in sorted.iter().zip(&weights) {
            for (slot, x) in next.iter_mut().zip(v.delta.values()) {
                *slot += w * x;
            }
        }
        for slot in next.iter_mut() {
            *slot /= total;
        }
        let displacement = {
            let mut acc = 0.0f64;
            for (a, b) in next.iter().zip(z.values()) {
                let d = a - b;
                acc += d * d;
            }
            acc.sqrt()
        };
        z = ParamVector::new(next, z.layout().to_vec())?;
        if displacement < tol {
            converged = true;
            break;
        }
    }
    let mut outcome = AggregateOutcome::plain(z);
    outcome.converged = Some(converged);
    Ok(outcome)
}

/// Cumulative per-client update histories for the similarity defense,
/// serialized into the run's engine-state sidecar.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct FoolsGoldState {
    pub histories: BTreeMap<usize, Vec<f64>>,
}

fn slice_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm_slice(a);
    let nb = l2_norm_slice(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Similarity-based reweighting: clients whose *cumulative* update
/// histories stay mutually aligned (sybils pushing one objective) are
/// down-weighted; a pardoning pass protects honest clients that merely
/// resemble an attacker. Histories are updated with this round's deltas
/// before weighting. If every weight collapses to zero the rule falls back
/// to the plain average and flags it.
pub fn foolsgold(
    views: &[UpdateView],
    state: &mut FoolsGoldState,
) -> Result<AggregateOutcome, DefenseError> {
    let sorted = ordered(views)?;
    let n = sorted.len();
    let dim = sorted[0].delta.len();
    // Accumulate this round's contributions first.
    for v in &sorted {
        if v.delta.len() != dim {
            return Err(ParamError::LengthMismatch {
                expected: dim,
                got: v.delta.len(),
            }
            .into());
        }
        let h = state
            .histories
            .entry(v.client_id)
            .or_insert_with(|| vec![0.0; dim]);
        if h.len() != dim {
            return Err(ParamError::LengthMismatch {
                expected: h.len(),
                got: dim,
            }
            .into());
        }
        for (slot, d) in h.iter_mut().zip(v.delta.values()) {
            *slot += d;
        }
    }
    let hist: Vec<&Vec<f64>> = sorted
        .iter()
        .map(|v| &state.histories[&v.client_id])
        .collect();
    let mut cs = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = slice_cosine(hist[i], hist[j]);
            cs[i][j] = c;
            cs[j][i] = c;
        }
    }
    let max_other = |row: &[f64], i: usize| -> f64 {
        row.iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let v_max: Vec<f64> = (0..n)
        .map(|i| if n == 1 { 0.0 } else { max_other(&cs[i], i) })
        .collect();
    // Pardoning: an honest client i that looks similar to a more
    // suspicious j (v_j > v_i) gets its similarity discounted by v_i / v_j.
    for i in 0..n {
        for j in 0..n {
            if i != j && v_max[j] > v_max[i] && v_max[j] > 0.0 {
                cs[i][j] *= v_max[i] / v_max[j];
            }
        }
    }
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            let m = if n == 1 { 0.0 } else { max_other(&cs[i], i) };
            (1.0 - m).clamp(0.0, 1.0)
        })
        .collect();
    let w_max = w.iter().cloned().fold(0.0f64, f64::max);
    if w_max > 0.0 {
        for wi in w.iter_mut() {
            *wi /= w_max;
        }
    }
    for wi in w.iter_mut() {
        if *wi == 1.0 {
            *wi = 0.99;
        }
        // Logit sharpening, then squash back into [0, 1].
        *wi = ((*wi / (1.0 - *wi)).ln() + 0.5).clamp(0.0, 1.0);
    }
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        let mut outcome = fedavg(views)?;
        outcome.fell_back_to_fedavg = true;
        outcome.weights = Some(w);
        return Ok(outcome);
    }
    let mut agg = vec![0.0f64; dim];
    for (v, wi) in sorted.iter().zip(&w) {
        for (slot, d) in agg.iter_mut().zip(v.delta.values()) {
            *slot += wi * d;
        }
    }
    for slot in agg.iter_mut() {
        *slot /= total;
    }
    let mut outcome =
        AggregateOutcome::plain(ParamVector::new(agg, sorted[0].delta.layout().to_vec())?);
    outcome.weights = Some(w);
    Ok(outcome)
}

/// Sign-adaptive server learning rate: coordinates where at least
/// `threshold` clients agree in sign keep `+server_lr`; the rest flip to
/// `−server_lr`. The outcome already contains the learning rate
/// (`includes_server_lr = true`), so the server applies it as a raw step.
pub fn rlr(
    views: &[UpdateView],
    threshold: f64,
    server_lr: f64,
) -> Result<AggregateOutcome, DefenseError> {
    let sorted = ordered(views)?;
    let mean = fedavg(views)?.update;
    let dim = mean.len();
    let mut out = vec![0.0f64; dim];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut sign_sum = 0.0f64;
        for v in &sorted {
            let x = v.delta.values()[c];
            sign_sum += if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
        let lr = if sign_sum.abs() >= threshold {
            server_lr
        } else {
            -server_lr
        };
        *slot = lr * mean.values()[c];
    }
    let mut outcome = AggregateOutcome::plain(ParamVector::new(
        out,
        mean.layout().to_vec(),
    )?);
    outcome.includes_server_lr = true;
    Ok(outcome)
}

/// Norm clipping as an aggregation rule: scale every update to at most
/// `bound` (direction preserved), then take the unweighted mean. The mean
/// of vectors with norm ≤ bound itself has norm ≤ bound.
pub fn norm_clipping(views: &[UpdateView], bound: f64) -> Result<AggregateOutcome, DefenseError> {
    let sorted = ordered(views)?;
    let clipped: Vec<ParamVector> = sorted
        .iter()
        .map(|v| {
            let mut d = v.delta.clone();
            clip_update(&mut d, bound);
            d
        })
        .collect();
    let sum = fixed_order_sum(clipped.iter())?;
    Ok(AggregateOutcome::plain(
        sum.scaled(1.0 / sorted.len() as f64),
    ))
}

/// Dispatches to the configured rule. `server_lr` feeds the sign-adaptive
/// rule; `fg_state` carries the similarity histories across rounds.
pub fn aggregate(
    rule: AggregationRule,
    views: &[UpdateView],
    server_lr: f64,
    fg_state: &mut FoolsGoldState,
) -> Result<AggregateOutcome, DefenseError> {
    match rule {
        AggregationRule::FedAvg => fedavg(views),
        AggregationRule::Median => coordinate_median(views),
        AggregationRule::TrimmedMean { trim_k } => trimmed_mean(views, trim_k),
        AggregationRule::Krum { f } => krum(views, f),
        AggregationRule::MultiKrum { f, m } => multi_krum(views, f, m),
        AggregationRule::Rfa { tol, max_iter } => rfa(views, tol, max_iter),
        AggregationRule::FoolsGold => foolsgold(views, fg_state),
        AggregationRule::Rlr { threshold } => rlr(views, threshold, server_lr),
        AggregationRule::NormClipping { bound } => norm_clipping(views, bound),
    }
}

/// Norm-clipping factor: `min(1, bound / ‖Δ‖)`, with a zero-norm update
/// passing through unchanged.
pub fn clip_factor(norm: f64, bound: f64) -> f64 {
    if norm == 0.0 {
        1.0
    } else {
        (bound / norm).min(1.0)
    }
}

/// Clips an update in place to the norm bound.
pub fn clip_update(delta: &mut ParamVector, bound: f64) {
    let norm = l2_norm_slice(delta.values());
    let factor = clip_factor(norm, bound);
    if factor != 1.0 {
        for v in delta.values_mut() {
            *v *= factor;
        }
    }
}

/// Adds i.i.d. Gaussian noise with standard deviation `sigma` to every
/// coordinate. `sigma = 0` is a strict no-op (no RNG draws), so a zero
/// noise configuration is byte-identical to no noise at all.
pub fn add_gaussian_noise(vec: &mut ParamVector, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated by config");
    for v in vec.values_mut() {
        *v += normal.sample(rng);
    }
}

/// Client-side local differential privacy: clip the update to `clip`, then
/// add Gaussian noise with deviation `sigma`.
pub fn apply_local_dp(delta: &mut ParamVector, clip: f64, sigma: f64, rng: &mut ChaCha8Rng) {
    clip_update(delta, clip);
    add_gaussian_noise(delta, sigma, rng);
}

/// Distance-based anomaly detector: flags the `f` updates with the highest
/// Krum scores (most distant from every dense cluster). Ties order by
/// higher score first, then lower client id. `f = 0` flags nothing;
/// `f >= n` is an error. When the cohort is too small for the standard
/// `n − f − 2` neighbor count, the count clamps to 1 so scores stay
/// defined for every `f < n`.
pub fn detect_high_krum_scores(
    views: &[UpdateView],
    f: usize,
) -> Result<Vec<usize>, DefenseError> {
    if f == 0 {
        return Ok(Vec::new());
    }
    let sorted = ordered(views)?;
    let n = sorted.len();
    if f >= n {
        return Err(DefenseError::TooFewUpdates {
            rule: "krum-score detector (needs f < n)",
            f,
            n,
        });
    }
    let scores = detector_scores(&sorted, f)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(sorted[a].client_id.cmp(&sorted[b].client_id))
    });
    let mut flagged: Vec<usize> = order[..f].iter().map(|&i| sorted[i].client_id).collect();
    flagged.sort_unstable();
    Ok(flagged)
}

/// Krum scores with the neighbor count clamped to at least 1 (detector
/// variant; the aggregation rules keep the strict `n >= f + 3` precondition).
fn detector_scores(sorted: &[&UpdateView], f: usize) -> Result<Vec<f64>, DefenseError> {
    let n = sorted.len();
    let keep = n.saturating_sub(f + 2).max(1).min(n - 1);
    let dists = pairwise_sq_dists(sorted)?;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dists[i][j]).collect();
        row.sort_by(f64::total_cmp);
        scores.push(row[..keep].iter().sum());
    }
    Ok(scores)
}

/// A detector takes the round's update views plus its `f` parameter and
/// returns the flagged client ids.
pub type DetectorFn = fn(&[UpdateView], usize) -> Result<Vec<usize>, DefenseError>;

/// Registry of anomaly detectors, keyed by config name. Additional
/// detectors can be registered without touching the engine: they receive
/// the same defense-facing [`UpdateView`] projection and return flagged
/// client ids.
pub struct DetectorRegistry {
    map: BTreeMap<&'static str, DetectorFn>,
}

impl DetectorRegistry {
    /// The built-in registry (currently the Krum-score detector under the
    /// name `mkrum_detector`).
    pub fn builtin() -> Self {
        let mut map: BTreeMap<&'static str, DetectorFn> = BTreeMap::new();
        map.insert("mkrum_detector", detect_high_krum_scores);
        Self { map }
    }

    pub fn register(&mut self, name: &'static str, detector: DetectorFn) {
        self.map.insert(name, detector);
    }

    pub fn get(&self, name: &str) -> Option<DetectorFn> {
        self.map.get(name).copied()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.map.keys().copied().collect()
    }
}
