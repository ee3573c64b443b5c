//! Attack and defense effectiveness metrics computed from per-round
//! series: tail-window attack success, peak attack success, post-attack
//! persistence, and pooled detection quality.
//!
//! Undefined values (empty denominators, missing phases) are represented
//! as `None` and serialize to JSON `null` — never silently as zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("attack window holds {window} rounds, fewer than t = {t}")]
    WindowTooShort { window: usize, t: usize },
    #[error("t must be at least 1")]
    ZeroT,
    #[error("cannot take the maximum of an empty series")]
    EmptySeries,
}

/// Mean attack success rate over the last `t` rounds of the attack window.
/// `window` must be the attack-phase series only.
pub fn asr_t(window: &[f64], t: usize) -> Result<f64, MetricError> {
    if t == 0 {
        return Err(MetricError::ZeroT);
    }
    if window.len() < t {
        return Err(MetricError::WindowTooShort {
            window: window.len(),
            t,
        });
    }
    let tail = &window[window.len() - t..];
    Ok(tail.iter().sum::<f64>() / t as f64)
}

/// Highest attack success rate over the given series (all phases by
/// default; the caller chooses the slice).
pub fn h_asr(series: &[f64]) -> Result<f64, MetricError> {
    if series.is_empty() {
        return Err(MetricError::EmptySeries);
    }
    Ok(series.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// How long the backdoor persists after the attack stops.
///
/// The default reading counts the consecutive run of post-attack rounds
/// with ASR ≥ threshold starting at the first post-attack round;
/// `count_all` instead counts every post-attack round at or above the
/// threshold regardless of position.
pub fn lifespan(post_series: &[f64], threshold: f64, count_all: bool) -> usize {
    if count_all {
        post_series.iter().filter(|&&v| v >= threshold).count()
    } else {
        post_series.iter().take_while(|&&v| v >= threshold).count()
    }
}

/// One round's detection outcome, paired with ground truth for scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundDetection {
    pub round: u64,
    /// Client ids the detector flagged.
    pub flagged: Vec<usize>,
    /// Selected client ids that were truly malicious this round.
    pub truth: Vec<usize>,
    /// All selected client ids this round.
    pub selected: Vec<usize>,
}

/// Pooled (micro-averaged) detection quality. Precision and recall pool
/// over rounds with at least one true malicious participant; the false
/// positive rate pools over rounds with none. Empty denominators yield
/// `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub fpr: Option<f64>,
}

pub fn detection_metrics(reports: &[RoundDetection]) -> DetectionMetrics {
    let mut true_pos = 0usize;
    let mut flagged_in_attack_rounds = 0usize;
    let mut truth_total = 0usize;
    let mut clean_flagged = 0usize;
    let mut clean_selected = 0usize;
    for r in reports {
        if r.truth.is_empty() {
            clean_flagged += r.flagged.len();
            clean_selected += r.selected.len();
        } else {
            flagged_in_attack_rounds += r.flagged.len();
            truth_total += r.truth.len();
            true_pos += r.flagged.iter().filter(|id| r.truth.contains(id)).count();
        }
    }
    let ratio = |num: usize, den: usize| -> Option<f64> {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    DetectionMetrics {
        precision: ratio(true_pos, flagged_in_attack_rounds),
        recall: ratio(true_pos, truth_total),
        fpr: ratio(clean_flagged, clean_selected),
    }
}

/// Knobs for the summary computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Tail-window length for the mean attack success rate.
    pub t: usize,
    /// Persistence threshold for the lifespan count.
    pub lifespan_threshold: f64,
    /// Restrict the peak attack success rate to the attack window instead
    /// of all rounds.
    pub h_asr_attack_window_only: bool,
    /// Count every post-attack round at or above the threshold instead of
    /// only the leading consecutive run.
    pub lifespan_count_all: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            t: 30,
            lifespan_threshold: 0.5,
            h_asr_attack_window_only: false,
            lifespan_count_all: false,
        }
    }
}

/// Everything the summary needs from a finished run. `asr` and `acc` are
/// indexed by round over the whole run; ranges are half-open round spans.
#[derive(Debug, Clone, Copy)]
pub struct SummaryInputs<'a> {
    pub asr: &'a [f64],
    pub acc: &'a [f64],
    pub attack_range: Option<(usize, usize)>,
    pub post_range: Option<(usize, usize)>,
    pub detections: &'a [RoundDetection],
    pub detector_configured: bool,
}

/// The end-of-run metric summary written to `summary.json`. `None`
/// serializes as `null` for any metric whose premise is absent (no attack
/// window of length ≥ t, no post phase, no detector, empty denominators).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub asr_t: Option<f64>,
    pub h_asr: Option<f64>,
    pub lifespan: Option<u64>,
    pub acc_final: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub fpr: Option<f64>,
    pub t: u64,
    pub lifespan_threshold: f64,
}

pub fn summarize(inputs: SummaryInputs<'_>, cfg: &MetricConfig) -> MetricSummary {
    let window = inputs
        .attack_range
        .map(|(s, e)| &inputs.asr[s.min(inputs.asr.len())..e.min(inputs.asr.len())]);
    let asr_tail = window.and_then(|w| asr_t(w, cfg.t).ok());
    let h = if cfg.h_asr_attack_window_only {
        window.and_then(|w| h_asr(w).ok())
    } else {
        h_asr(inputs.asr).ok()
    };
    let life = inputs.post_range.map(|(s, e)| {
        let post = &inputs.asr[s.min(inputs.asr.len())..e.min(inputs.asr.len())];
        lifespan(post, cfg.lifespan_threshold, cfg.lifespan_count_all) as u64
    });
    let det = if inputs.detector_configured {
        detection_metrics(inputs.detections)
    } else {
        DetectionMetrics {
            precision: None,
            recall: None,
            fpr: None,
        }
    };
    MetricSummary {
        asr_t: asr_tail,
        h_asr: h,
        lifespan: life,
        acc_final: inputs.acc.last().copied(),
        precision: det.precision,
        recall: det.recall,
        fpr: det.fpr,
        t: cfg.t as u64,
        lifespan_threshold: cfg.lifespan_threshold,
    }
}
