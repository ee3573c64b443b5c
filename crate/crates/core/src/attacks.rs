//! Backdoor attack strategies, implemented as training hooks layered on the
//! benign local-training loop.
//!
//! A malicious client with `poison_count = 0`, no gradient adjustment, no
//! coordinate mask, and unit scaling follows exactly the same code path as a
//! benign client, producing a bit-identical update.

use std::sync::{Arc, Mutex};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{apply_trigger, Dataset, TriggerSpec};
use crate::model::{
    cross_entropy, forward, input_gradient, train_with_hooks, ModelError, ModelSpec, TrainConfig,
    TrainHooks, TrainOutput,
};
use crate::params::{sample_without_replacement, ParamVector};

/// Errors specific to attack coordination.
#[derive(Debug, Error)]
pub enum AttackError {
    #[error("round {round} already has a trigger published by client {publisher}")]
    AlreadyPublished { round: u64, publisher: usize },
    #[error("coordinate mask ratio must be in [0, 1], got {0}")]
    BadMaskRatio(f64),
    #[error("trigger optimization needs a patch-based trigger")]
    NotAPatternTrigger,
    #[error("trigger optimization needs at least one non-target candidate sample")]
    NoCandidates,
}

/// The backdoor strategy a malicious client runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    /// Stamp a fixed pixel pattern and relabel to the target class.
    Patch,
    /// Distributed variant: each attacker stamps one fragment of the pattern.
    Distributed,
    /// Replace samples with out-of-distribution edge cases labeled as target.
    EdgeCase,
    /// Like `Patch`, but the pattern values are optimized against the
    /// current global model before each attack round.
    OptimizedPatch,
}

/// How a malicious update is boosted before submission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoostMode {
    /// Submit the raw poisoned update.
    None,
    /// Scale by `factor` so the aggregate step lands on the attacker's
    /// local model (model replacement). `factor = None` derives
    /// `clients_per_round / (server_lr · cohort_size)` at runtime.
    Replacement { factor: Option<f64> },
    /// Blend an anomaly-evasion term into every gradient step:
    /// `g ← alpha · g_task + 2 (1 − alpha) (θ − θ_global)`, then scale the
    /// finished update by `factor` (`None` means 1.0).
    ConstrainScale { alpha: f64, factor: Option<f64> },
}

/// Scaling factor that makes the aggregate step equal the attacker cohort's
/// local model: `K / (η · m)` for `K` participants per round, server
/// learning rate `η`, and `m` coordinated attackers splitting the boost.
pub fn replacement_factor(clients_per_round: usize, server_lr: f64, cohort_size: usize) -> f64 {
    clients_per_round as f64 / (server_lr * cohort_size.max(1) as f64)
}

/// Keep-mask over parameter coordinates: `true` marks the `⌊ratio · d⌋`
/// coordinates where the previous global update moved least (ties broken
/// toward the lower index). Restricting the attacker's gradient to these
/// rarely-updated coordinates makes the backdoor harder to overwrite.
///
/// Returns `(mask, used_full_space)`; without a previous update there is
/// nothing to rank, so every coordinate is allowed and the flag is set.
pub fn neurotoxin_mask(
    prev_global_delta: Option<&ParamVector>,
    ratio: f64,
    dim: usize,
) -> Result<(Vec<bool>, bool), AttackError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(AttackError::BadMaskRatio(ratio));
    }
    let prev = match prev_global_delta {
        Some(prev) => prev,
        None => return Ok((vec![true; dim], true)),
    };
    let k = (ratio * dim as f64).floor() as usize;
    let mut order: Vec<usize> = (0..dim).collect();
    let mags = prev.values();
    order.sort_by(|&a, &b| {
        mags[a]
            .abs()
            .total_cmp(&mags[b].abs())
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; dim];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    Ok((mask, false))
}

/// The fully-resolved per-round behavior of one malicious client.
pub struct MaliciousPlan<'a> {
    /// Effective trigger for this client this round (full pattern, a
    /// distributed fragment, an optimized pattern, or an edge-case pool).
    pub trigger: &'a TriggerSpec,
    /// Samples poisoned at the head of every batch (clamped to batch size
    /// for a short final batch).
    pub poison_count: usize,
    /// `Some((alpha, global))` enables the constrain-and-scale gradient
    /// blend toward the round's global parameters.
    pub constrain: Option<(f64, &'a ParamVector)>,
    /// Keep-mask applied to the gradient before the momentum update, so
    /// masked-off coordinates contribute exactly zero to the update.
    pub mask: Option<&'a [bool]>,
    /// Multiplier applied to the finished update (1.0 submits it as-is).
    pub scale: f64,
}

struct MaliciousHooks<'a> {
    plan: &'a MaliciousPlan<'a>,
    image_shape: Option<(usize, usize, usize)>,
}

impl TrainHooks for MaliciousHooks<'_> {
    fn poison(&mut self, xs: &mut Array2<f64>, ys: &mut [usize]) -> Result<(), ModelError> {
        let n = self.plan.poison_count.min(xs.nrows());
        for row in 0..n {
            let sample: Vec<f64> = xs.row(row).to_vec();
            let (poisoned, label) = apply_trigger(&sample, self.image_shape, self.plan.trigger)?;
            for (dst, src) in xs.row_mut(row).iter_mut().zip(&poisoned) {
                *dst = *src;
            }
            ys[row] = label;
        }
        Ok(())
    }

    fn adjust_grad(&mut self, theta: &ParamVector, grad: &mut ParamVector) {
        if let Some((alpha, global)) = self.plan.constrain {
            for ((g, t), g0) in grad
                .values_mut()
                .iter_mut()
                .zip(theta.values())
                .zip(global.values())
            {
                *g = alpha * *g + 2.0 * (1.0 - alpha) * (t - g0);
            }
        }
        // The mask comes last so masked-off coordinates stay exactly zero
        // regardless of the other adjustments.
        if let Some(mask) = self.plan.mask {
            for (g, &keep) in grad.values_mut().iter_mut().zip(mask) {
                if !keep {
                    *g = 0.0;
                }
            }
        }
    }

    fn transform_delta(&mut self, delta: ParamVector) -> ParamVector {
        if self.plan.scale == 1.0 {
            delta
        } else {
            delta.scaled(self.plan.scale)
        }
    }
}

/// Malicious local training: the benign loop plus the plan's hooks.
pub fn malicious_train(
    global: &ParamVector,
    spec: &ModelSpec,
    tc: &TrainConfig,
    data: &Dataset,
    indices: &[usize],
    rng: ChaCha8Rng,
    plan: &MaliciousPlan<'_>,
) -> Result<TrainOutput, ModelError> {
    let mut hooks = MaliciousHooks {
        plan,
        image_shape: data.image_shape(),
    };
    train_with_hooks(global, spec, tc, data, indices, rng, &mut hooks)
}

/// Outcome of one trigger-optimization pass.
#[derive(Debug, Clone, Serialize)]
pub struct TriggerOptStats {
    pub accepted_steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

const BACKTRACK_LIMIT: usize = 10;

/// Optimizes a patch trigger against the current global model: projected
/// gradient descent on the patch values minimizing the target-class
/// cross-entropy over a sampled batch of non-target inputs, with halving
/// backtracking (at most 10 halvings per step, stopping at the first step
/// that cannot improve). The loss is monotonically non-increasing and the
/// returned values stay in `[0, 1]`.
pub fn optimize_trigger(
    params: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
    base: &TriggerSpec,
    iterations: usize,
    initial_step: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(TriggerSpec, TriggerOptStats), AttackError> {
    if !base.kind.is_pattern() {
        return Err(AttackError::NotAPatternTrigger);
    }
    let candidates: Vec<usize> = (0..data.n_samples())
        .filter(|&i| data.label(i) != base.target_class)
        .collect();
    if candidates.is_empty() {
        return Err(AttackError::NoCandidates);
    }
    let take = batch_size.max(1).min(candidates.len());
    let picked: Vec<usize> = sample_without_replacement(candidates.len(), take, rng)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let image_shape = data.image_shape();

    let stamp = |trigger: &TriggerSpec| -> Result<(Array2<f64>, Vec<usize>), AttackError> {
        let mut xs = Array2::zeros((picked.len(), data.n_features()));
        for (row, &i) in picked.iter().enumerate() {
            let sample = data.input_row(i).to_vec();
            let (poisoned, _) = apply_trigger(&sample, image_shape, trigger)
                .map_err(|_| AttackError::NotAPatternTrigger)?;
            for (dst, src) in xs.row_mut(row).iter_mut().zip(&poisoned) {
                *dst = *src;
            }
        }
        let ys = vec![base.target_class; picked.len()];
        Ok((xs, ys))
    };
    let batch_loss = |trigger: &TriggerSpec| -> Result<f64, AttackError> {
        let (xs, ys) = stamp(trigger)?;
        let logits = forward(params, spec, &xs).map_err(|_| AttackError::NotAPatternTrigger)?;
        Ok(cross_entropy(&logits, &ys))
    };

    let mut current = base.clone();
    let mut current_loss = batch_loss(&current)?;
    let initial_loss = current_loss;
    let coord_indices = current
        .patch_feature_indices(image_shape, data.n_features())
        .map_err(|_| AttackError::NotAPatternTrigger)?;
    let mut accepted = 0usize;

    'outer: for _ in 0..iterations {
        let (xs, ys) = stamp(&current)?;
        let (_, in_grad) =
            input_gradient(params, spec, &xs, &ys).map_err(|_| AttackError::NotAPatternTrigger)?;
        // With every sample sharing the patch values, d(mean CE)/d(value)
        // is the column sum of the per-sample input gradients.
        let grad: Vec<f64> = coord_indices
            .iter()
            .map(|&c| in_grad.column(c).sum())
            .collect();

        let mut step = initial_step;
        for _halving in 0..=BACKTRACK_LIMIT {
            let values: Vec<f64> = current
                .patch()
                .iter()
                .zip(&grad)
                .map(|(p, g)| (p.value - step * g).clamp(0.0, 1.0))
                .collect();
            let candidate = current
                .with_patch_values(&values)
                .map_err(|_| AttackError::NotAPatternTrigger)?;
            let loss = batch_loss(&candidate)?;
            if loss < current_loss {
                current = candidate;
                current_loss = loss;
                accepted += 1;
                continue 'outer;
            }
            step *= 0.5;
        }
        // No step length improved the loss: converged.
        break;
    }

    let stats = TriggerOptStats {
        accepted_steps: accepted,
        initial_loss,
        final_loss: current_loss,
    };
    Ok((current, stats))
}

/// Round-scoped trigger shared by a coordinated attacker cohort. The
/// designated publisher (the lowest selected malicious id) publishes once
/// per round; a second publication in the same round is an error, and a
/// fetch before any publication reports `None` so the caller can fall back
/// to the static trigger.
#[derive(Default)]
pub struct AttackContext {
    inner: Mutex<ContextSlot>,
}

#[derive(Default)]
struct ContextSlot {
    round: Option<u64>,
    publisher: usize,
    trigger: Option<Arc<TriggerSpec>>,
}

impl AttackContext {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears any previously-published trigger at the start of a round.
    pub fn begin_round(&self, round: u64) {
        let mut slot = self.inner.lock().expect("context lock");
        slot.round = Some(round);
        slot.trigger = None;
        slot.publisher = 0;
    }

    pub fn publish(
        &self,
        round: u64,
        client_id: usize,
        trigger: TriggerSpec,
    ) -> Result<(), AttackError> {
        let mut slot = self.inner.lock().expect("context lock");
        if slot.round == Some(round) && slot.trigger.is_some() {
            return Err(AttackError::AlreadyPublished {
                round,
                publisher: slot.publisher,
            });
        }
        slot.round = Some(round);
        slot.publisher = client_id;
        slot.trigger = Some(Arc::new(trigger));
        Ok(())
    }

    /// The trigger published for `round`, if any.
    pub fn fetch(&self, round: u64) -> Option<Arc<TriggerSpec>> {
        let slot = self.inner.lock().expect("context lock");
        if slot.round == Some(round) {
            slot.trigger.clone()
        } else {
            None
        }
    }
}
